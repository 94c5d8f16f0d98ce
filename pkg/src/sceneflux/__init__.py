"""sceneflux: fluid-particle framework for instantaneous scene change modeling."""

__version__ = "0.1.0"
