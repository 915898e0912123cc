"""vpbridge: textualize a before/after visual prompt through a deterministic
diffusion bridge, then edit new images with the learned embedding."""

__version__ = "0.1.0"

from .attention import (
    AttentionKind,
    AttentionOverride,
    AttentionRecord,
    InjectionPlan,
    apply_intensity,
    build_column_transform,
    build_mask,
    build_step_override,
    merge_cross,
    merge_self,
    should_inject,
)
from .bridge import (
    GaussianToyModel,
    LatentState,
    Trajectory,
    analytic_gaussian_solve,
    ddib_translate,
    ddim_step,
    gaussian_convergence_study,
    gaussian_ddim_invert,
    generate,
    invert,
    load_trajectory,
    save_trajectory,
)
from .config import BridgeConfig
from .denoiser import (
    DenoiserOutput,
    DenoiserWeights,
    LabeledImage,
    cfg_predict,
    combine_guidance,
    denoising_loss,
    load_weights,
    make_null_embedding,
    predict_noise,
    save_weights,
    train_denoiser,
    untrained_weights,
)
from .editor import (
    BatchItemError,
    EditResult,
    edit,
    edit_batch,
    edit_detailed,
    generate_from_embedding,
)
from .embedding import PromptEmbedding, TokenRole, load_embedding, role_layout, save_embedding
from .errors import ConfigurationError, DomainError, NumericalError, RenormalizationError
from .evalkit import (
    EvalReport,
    FeatureProvider,
    direction_similarity,
    evaluate,
    image_similarity,
    parse_provider,
    pixel_provider,
    psnr,
    random_projection_provider,
    ssim,
    write_report,
)
from .images import load_image, save_image
from .schedule import NoiseSchedule
from .textualize import (
    StepEvent,
    StepLoss,
    TextualizationResult,
    VisualPrompt,
    beta,
    init_embedding,
    step_loss,
    textualize,
)
from .toydata import (
    SceneSpec,
    TestCase,
    TransformSpec,
    apply_transform,
    build_training_corpus,
    classify_shape,
    load_prompt_set,
    make_prompt_set,
    render,
    write_prompt_set,
)
