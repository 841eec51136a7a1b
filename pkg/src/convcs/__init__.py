"""convcs: convolutional sparse coding for compressive sensing.

Learns convolutional dictionaries with an ADMM solver, reconstructs images
from compressed linear measurements (pre-learned or in-situ dictionaries),
extends to a two-layer model through block unpooling, and classifies from
the recovered feature maps.
"""

from .conv_ops import (
    apply_F,
    apply_F_adj,
    apply_T,
    apply_T_adj,
    conv2_full,
    conv2_valid,
    fft_conv2,
    rot180,
)
from .sensing import (
    SensingOperator,
    GaussianOperator,
    PermutedHadamardOperator,
    make_gaussian,
    make_permuted_hadamard,
    measurement_count,
    load_operator,
    save_operator,
    vectorize_image,
    unvectorize_image,
)
from .dictionary_learning import (
    ConvDictionary,
    SolverConfig,
    DivergenceError,
    adaptive_threshold,
    dict_gradient_step,
    dual_update,
    feature_cg_solve,
    load_dictionary,
    save_dictionary,
    shrink,
    sparse_code,
    train_dictionary,
)
from .csrecon import (
    MeasurementSet,
    ReconstructionResult,
    dict_gradient_step_cs,
    feature_cg_solve_cs,
    load_measurements,
    measure_images,
    reconstruct_insitu,
    reconstruct_prelearned,
    save_measurements,
    synthesize,
)
from .multilayer import (
    LayerConfig,
    TwoLayerModel,
    TwoLayerPlan,
    pool,
    pretrain_unpool_map,
    project_dictionary,
    reconstruct_projected,
    train_two_layer,
    unpool,
)
from .softmax import (
    SoftmaxModel,
    extract_features,
    load_softmax,
    save_softmax,
    softmax_predict,
    softmax_train,
)
from .dataio import (
    Dataset,
    load_idx,
    psnr,
    save_image_pgm,
    write_metrics_csv,
)
from .estimators import (
    CompressiveReconstructor,
    ConvDictionaryLearner,
    SoftmaxClassifier,
)

__version__ = "0.1.0"
