"""FMM-wave heartbeat modelling and FMM-Head autoencoders for ECG anomaly detection."""

__version__ = "0.1.0"
