"""Synthetic teacher/student harness."""
from .data import Task, TaskSpec, ToyBatch
from .model import ToyModel, make_student, make_teacher
from .train import VARIANTS, Experiment, RunConfig, RunReport, load_config, run_report_write, train

__all__ = ["Task", "TaskSpec", "ToyBatch", "ToyModel", "make_student", "make_teacher",
           "VARIANTS", "Experiment", "RunConfig", "RunReport", "load_config", "run_report_write", "train"]
