//! Evaluation: diffusion perplexity, task metrics, infill diagnostics and
//! synthetic task generators.

mod metrics;
mod ppl;
pub mod synth;

pub use metrics::{
    exact_match, infill_diagnostics, normalize_answer, rank_correlations, Correlations, InfillDiagnostics,
    MetricReport,
};
pub use ppl::{corpus_ppl, diffusion_ppl, PplConfig, PplEstimate, PplEstimator};
pub use synth::{synth_task_generate, synth_vocabulary, SynthDataset, SynthExample, SynthTask, SynthTaskSpec};

/// Flat `key=value` records, one field per line.
pub trait KeyValue {
    fn fields(&self) -> Vec<(&'static str, String)>;

    fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
