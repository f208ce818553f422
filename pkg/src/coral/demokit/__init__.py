"""Mock skillsets and drivers for the desk-scale demos.

Each module runs as its own process (``python -m coral.demokit.<name>``) and
talks to the rest of the instance only over the bus.
"""
