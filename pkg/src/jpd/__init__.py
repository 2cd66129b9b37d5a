"""Just-producible-difference toolkit: vowel continua, simulated mimicry
subjects, formant measurement and floored-probit limen estimation."""

__version__ = "0.1.0"
