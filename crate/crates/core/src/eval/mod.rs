//! Scoring synthesized frames: nearest-phoneme decoding, character error
//! rates, per-language reports and the code-switching test set.

pub mod codeswitch;
pub mod compare;
pub mod metrics;
pub mod report;

pub use codeswitch::{
    code_switch_eval, generate_switch_sentences, parse_sentences, read_sentences, switch_rows, write_sentences,
    SwitchScore, SwitchSentence, SwitchWord,
};
pub use compare::{
    run_code_switch_comparison, run_comparison, single_language_view, CompareConfig, Comparison, Regime, RunResult,
    SwitchComparison, SwitchRun,
};
pub use metrics::{cer, edit_alignment, frames_to_symbols, span_error_rate, AlignedOp, EditOp};
pub use report::{
    evaluate_ground_truth, evaluate_model, max_steps_for, score_frames, synthesize, EvalReport, EvalRow,
    UtteranceScore, REPORT_HEADER,
};
