"""romkit: joint-angle kinematics and statistics for resistance-training video landmarks."""

__version__ = "0.1.0"
