from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, Preset, load_config
from .report import ReportError, ReportKind, report
from .runner import OUTPUT_ENV, output_root, run
from .store import CorruptRecord, RecordStore, ResultRecord

__all__ = ["ConfigError", "CorruptRecord", "ExperimentConfig", "OUTPUT_ENV", "Preset",
           "RecordStore", "ReportError", "ReportKind", "ResultRecord", "SCHEMA_VERSION",
           "load_config", "output_root", "report", "run"]
