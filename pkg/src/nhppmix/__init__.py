"""Spline-rate NHPP models for classifying and clustering event-time observations."""
from .basis import BasisSpec, DomainError, evaluate_basis, integrate_basis
from .classify import ClassifierModel, LabeledDataset, assign, posterior, predict, train
from .cluster import EMConfig, MixtureModel, Responsibilities, e_step, fit_em, m_step
from .core import (
    EventSeries,
    NonPositiveRateError,
    RateModel,
    cumulative_intensity,
    log_likelihood,
    objective_gradient,
    objective_hessian,
    rate_at,
)
from .evaluate import CVConfig, MetricsReport, clustering_accuracy, cross_validate
from .optimize import FitConfig, FitReport, fit_mle
from .simulate import RateSpec, make_synthetic_dataset, thin

__version__ = "0.1.0"
