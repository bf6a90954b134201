from .harness import ExperimentSpec, Harness, MetricsRecord, RequestRecord, record_from_trace

__all__ = ["ExperimentSpec", "Harness", "MetricsRecord", "RequestRecord", "record_from_trace"]
