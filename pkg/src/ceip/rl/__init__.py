from ceip.rl.bc import BCPolicy, train_bc
from ceip.rl.evaluate import EvalReport, EvalRow, ReplayPolicy, ScriptedPolicy, evaluate, read_report_csv
from ceip.rl.prior import PriorBundle, PriorConfigError, identity_bundle, prior_step, single_flow_bundle
from ceip.rl.sac import LatentGaussianPolicy, ReplayBuffer, SacConfig, train_sac

__all__ = [
    "BCPolicy", "EvalReport", "EvalRow", "LatentGaussianPolicy", "PriorBundle", "PriorConfigError",
    "ReplayBuffer", "ReplayPolicy", "SacConfig", "ScriptedPolicy", "evaluate", "identity_bundle",
    "prior_step", "read_report_csv", "single_flow_bundle", "train_bc", "train_sac",
]
