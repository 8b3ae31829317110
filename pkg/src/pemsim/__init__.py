"""Co-simulation of packetized energy management fleets, their coordinator,
an aggregate Markov model with a Kalman filter, and a two-area grid with AGC."""
from .coordinator import Coordinator, CoordinatorConfig, FeedbackPolicy
from .devices import DeviceClass, DeviceParams
from .estimator import FleetEstimator, NoiseConfig
from .fleet import Fleet
from .grid import GridParams, TwoAreaGrid
from .macromodel import ControlInput, Macromodel
from .metrics import RunMetrics, compute_metrics
from .protocol import ChannelModel, Kind, PacketMessage, decode, encode
from .scenario import load as load_scenario
from .scheduler import Priority, Scheduler
from .simulation import CoSimulation, run_scenario

__version__ = "0.1.0"
