"""Co-simulation middleware: local Modbus/socket interface, remote transports,
signal reconstruction and a synthetic federate harness."""

__version__ = "0.1.0"
