"""multitap: cross-domain recommendation with multi-criteria user personas,
target-adaptive doppelganger transfer and a LightGCN behavioral backbone."""

__version__ = "0.1.0"
