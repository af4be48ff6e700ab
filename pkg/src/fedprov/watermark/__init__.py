from .hashing import green_masks, mix64
from .kgw import (KgwSpec, effective_gamma, GreenLists, green_list, kgw_generate, kgw_generate_batch, kgw_pvalue,
                  kgw_radioactivity_detect, kgw_score_text, kgw_text_detect)
from .kth import (KthKey, KthSpec, its_select, key_sequence, kth_alignment_cost, kth_generate_batch,
                  kth_generate_its, kth_permutation_test, kth_radioactivity_detect, kth_text_detect)
from .result import DetectionResult

__all__ = [
    "DetectionResult", "GreenLists", "effective_gamma", "KgwSpec", "KthKey", "KthSpec", "green_list", "green_masks",
    "its_select", "key_sequence", "kgw_generate", "kgw_generate_batch", "kgw_pvalue",
    "kgw_radioactivity_detect", "kgw_score_text", "kgw_text_detect", "kth_alignment_cost",
    "kth_generate_batch", "kth_generate_its", "kth_permutation_test", "kth_radioactivity_detect",
    "kth_text_detect", "mix64",
]
