from .aslip import AslipParams, make_aslip
from .ball import BallParams, analytic_ball_flow, ball_impact_time, make_ball
from .base import MeasurementModel, linear, selector

__all__ = [
    "AslipParams",
    "BallParams",
    "MeasurementModel",
    "analytic_ball_flow",
    "ball_impact_time",
    "linear",
    "make_aslip",
    "make_ball",
    "selector",
]
