"""Model recycling toolkit.

Builds a pool of parameter-efficient source models over a frozen shared
trunk, selects the most transferable ones for a new labeled task via k-NN
scoring in each model's feature space, and adapts them with convex module
mixing trained under a cross-entropy + distance-correlation objective, in
both white-box (weights available) and black-box (features only) regimes.
"""

from .autodiff import Adam, Graph, ShapeError, Tensor, finite_diff_grad
from .blackbox import (FeatureApi, IcaTransformer, build_blackbox_model,
                       fastica_fit, fastica_transform, pool_feature_api)
from .dcor import dc_loss_sum, dcor, double_center, pairwise_dist_matrix
from .eft import EftConfig, EftLayerWeights, eft_forward, param_count
from .mixing import (MixedModel, MixingSpec, build_mixed_model, finetune_source,
                     init_mixing, mix_features, mix_params, train_independent,
                     train_mixed)
from .selection import (SelectionConfig, SelectionReport, euclidean_dist,
                        knn_accuracy, knn_predict, select_top_m)
from .sources import (Backbone, BackboneConfig, DivergenceError, FeatureDataset,
                      Pool, SourceModelRecord, append_model, extract_features,
                      init_pool, load_pool, softmax_cross_entropy, train_source)
from .tasks import (FamilySpec, Suite, TaskSpec, TrainConfig, gen_family_suite,
                    gen_overlap_suite, load_suite, load_task, sample_target_task,
                    save_suite, save_task)

__version__ = "0.1.0"
