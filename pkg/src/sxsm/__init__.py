"""SIP SPIT benchmark lab: attack engine, countermeasure endpoint, measurement harness."""

__version__ = "0.1.0"
