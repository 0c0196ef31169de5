"""Agent-based tax-compliance simulator with a suggestion stage and a DQN stage."""

from taxsim.calibration import CalibrationData, load_calibration
from taxsim.world import RunResult, SimulationConfig, init_world, run

__all__ = ["CalibrationData", "RunResult", "SimulationConfig", "init_world", "load_calibration", "run"]
__version__ = "0.1.0"
