"""Training-free transfer of LoRA-X adapters between base models."""
from .adapters import (AdapterBundle, DenseLoraXAdapter, LoraAdapter, LoraXAdapter, export_up_down, init_lorax,
                       materialize_delta, merge_into_base, validate_adapter)
from .numerics import SvdFactors, orthonormality_defect, pseudo_inverse, svd, truncated_svd
from .similarity import (MatchingPlan, PairingRules, SimilarityReport, SimilarityScore, build_similarity_report,
                         match_modules, module_similarity, unweighted_similarity, weighted_similarity)
from .tensor_store import ModuleKey, TensorBundle, parse_module_key, read_bundle, write_bundle
from .transfer import (BasisMap, TransferConfig, copy_sigma_baseline, map_basis_diff_dim, transfer_bundle,
                       transfer_lora_baseline, transfer_same_dim)
from .transport import CostMatrix, TransportPlan, atc, brute_force_transport, build_cost_matrix, solve_min_cost_flow

__version__ = "0.1.0"
