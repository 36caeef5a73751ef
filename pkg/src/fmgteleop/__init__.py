"""Force-myography to finger-pose regression and robot-hand teleoperation toolkit."""

__version__ = "0.1.0"
