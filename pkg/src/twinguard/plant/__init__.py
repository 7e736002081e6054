"""Tank-network plant simulator."""

from .io import load_config, save_config
from .sim import (Plant, PlantState, SensorFrame, export_csv, initial_state, integrate_step, measure,
                  nominal_control, observe, simulate, validate_steady_state)
from .topology import (Actuator, NoiseConfig, Pipe, PlantTopology, Sensor, Tank, default_noise,
                       default_topology, hazen_williams, hazen_williams_dq, observe_values)
