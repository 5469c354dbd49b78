from .checks import GradCheckReport, check_grad
from .config import ConfigError, ExperimentConfig
from .records import SCHEMA_VERSION, RecordError, RunRecord, SchemaVersionError, read_events
from .run import RunFailure, run, sweep
from .tools import DPTables, dp_oracle, plot_data
