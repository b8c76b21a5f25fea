//! Multi-task instruction tuning: template rendering with option
//! shuffling, hybrid sequence assembly, answer-only loss, and constrained
//! greedy prediction.

pub mod assemble;
pub mod predict;
pub mod templates;
pub mod tune;

pub use assemble::{assemble_sequence, hybrid_prompt_sequence, InstructLayout};
pub use predict::{predict_answer, predict_answer_free, Prediction};
pub use templates::{
    class_of_slot, render_instruction, task_classes, template, AnswerStyle, InstructionTemplate,
    RenderedInstruction, TEMPLATES,
};
pub use tune::{answer_loss, evaluate_items, InstructDataset, InstructItem, TuneLogRecord, TuneOptions, Tuner};
