//! Evaluation protocols: token-removal faithfulness, component masking,
//! probe-guided prompt masking, attention baselines and the ablation oracle.

pub mod baselines;
pub mod bench;
pub mod faithfulness;
pub mod masking;
pub mod subspace_mask;

pub use baselines::{attention_rollout, baseline_scores, BaselineMethod};
pub use bench::{ablation_oracle_neurons, bench_depass_vs_ablation, depass_neuron_scores, BenchReport};
pub use faithfulness::{
    apply_token_intervention, correct_examples, delta_p, faithfulness_csv, intervention_count, run_faithfulness,
    surviving_positions, target_probability, token_scores, FaithfulnessConfig, FaithfulnessCurve, InterventionKind,
    InterventionSpec, TokenScoreMethod,
};
pub use masking::{
    all_heads, component_ablation, component_scores, mask_components, masking_csv, run_component_masking,
    select_components, ComponentScoreMethod, MaskOrder, MaskedRunner, MaskingCurve, UnitKind,
};
pub use subspace_mask::{depass_subspace_masking, SubspaceMaskConfig, SubspaceMaskResult};
