"""Desk-scale spectrum sensing workbench.

Simulates primary-user signals, trains a CNN detector on raw IQ samples,
compares it against energy detection and the optimal LLR detector, and
evaluates unsupervised (kernel MMD projection) and supervised (fine-tuning)
transfer between signal domains.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, TcaSettings, config_hash, load_config  # noqa: E402,F401
from .detectors import (  # noqa: E402,F401
    CovariancePair,
    RocCurve,
    energy_score,
    energy_scores,
    llr_score,
    llr_scores,
    roc_auc,
    roc_from_scores,
)
from .metrics import auc_over_examples, pd_at_pfa  # noqa: E402,F401
from .network import (  # noqa: E402,F401
    NetworkSpec,
    NetworkWeights,
    TrainConfig,
    bce_loss,
    forward,
    init_weights,
    load_weights,
    predict_scores,
    save_weights,
    train,
)
from .signals import (  # noqa: E402,F401
    Dataset,
    FadingSpec,
    ScenarioConfig,
    SensingExample,
    analytic_covariances,
    build_dataset,
    load_dataset,
    save_dataset,
)
from .transfer import (  # noqa: E402,F401
    FinetunePlan,
    TcaModel,
    fine_tune,
    mmd_distance,
    run_finetune_sweep,
    tca_fit,
    tca_sense,
    tca_transform,
)
