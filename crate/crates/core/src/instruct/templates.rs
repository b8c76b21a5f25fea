//! Instruction templates for the six downstream task shapes, with option
//! shuffling for the multiple-choice tasks.

use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

const OPTION_LETTERS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

/// How a task's answers are written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerStyle {
    /// One fixed label string per class ("Yes"/"No", emotion names).
    Labels(&'static [&'static str]),
    /// Lettered multiple choice; class descriptions fill the option slots
    /// and the answer is the letter, e.g. "(A)".
    Options(&'static [&'static str]),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub id: &'static str,
    pub question: &'static str,
    pub style: AnswerStyle,
}

impl InstructionTemplate {
    pub fn n_classes(&self) -> usize {
        match &self.style {
            AnswerStyle::Labels(l) => l.len(),
            AnswerStyle::Options(o) => o.len(),
        }
    }

    pub fn is_multiple_choice(&self) -> bool {
        matches!(self.style, AnswerStyle::Options(_))
    }

    /// All answer strings in canonical class order (identity permutation).
    pub fn answer_strings(&self) -> Vec<String> {
        match &self.style {
            AnswerStyle::Labels(l) => l.iter().map(|s| format!(" {s}")).collect(),
            AnswerStyle::Options(o) => {
                (0..o.len()).map(|i| format!(" ({})", OPTION_LETTERS[i])).collect()
            }
        }
    }
}

/// The built-in tasks: abnormality and workload detection (yes/no), event
/// type (6 options), emotion (3 labels), sleep stage (5 options), and
/// slowing type (3 options).
pub const TEMPLATES: &[InstructionTemplate] = &[
    InstructionTemplate {
        id: "abnormal",
        question: "Is this EEG segment abnormal?",
        style: AnswerStyle::Labels(&["No", "Yes"]),
    },
    InstructionTemplate {
        id: "event",
        question: "Which event type does this EEG segment belong to?",
        style: AnswerStyle::Options(&[
            "spike and slow wave",
            "generalized periodic epileptiform discharge",
            "periodic lateralized epileptiform discharge",
            "eye movement",
            "artifact",
            "background",
        ]),
    },
    InstructionTemplate {
        id: "emotion",
        question: "Which emotion type does this EEG segment belong to?",
        style: AnswerStyle::Labels(&["Positive", "Neutral", "Negative"]),
    },
    InstructionTemplate {
        id: "sleep",
        question: "Which sleep type does this EEG segment belong to?",
        style: AnswerStyle::Options(&["Wake", "NREM-1", "NREM-2", "NREM-3", "REM"]),
    },
    InstructionTemplate {
        id: "workload",
        question: "Is this EEG segment of high workload?",
        style: AnswerStyle::Labels(&["No", "Yes"]),
    },
    InstructionTemplate {
        id: "slowing",
        question: "Which type does this EEG segment belong to?",
        style: AnswerStyle::Options(&["background", "seizure", "slowing"]),
    },
];

pub fn template(id: &str) -> Option<&'static InstructionTemplate> {
    TEMPLATES.iter().find(|t| t.id == id)
}

pub fn task_classes(id: &str) -> Option<usize> {
    template(id).map(InstructionTemplate::n_classes)
}

/// A rendered instruction: the prompt text from "Question:" through
/// "Answer:", the answer text, and the option permutation that was used
/// (slot -> class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedInstruction {
    pub prompt: String,
    pub answer: String,
    pub permutation: Vec<usize>,
}

/// Render a template for one class label. `permutation` maps option slot
/// to class; identity when `None` or for label-style answers. The answer
/// string tracks wherever the true class landed.
pub fn render_instruction(
    t: &InstructionTemplate,
    class_label: usize,
    permutation: Option<&[usize]>,
) -> Result<RenderedInstruction> {
    let n = t.n_classes();
    if class_label >= n {
        return Err(TensorError::InvalidArg {
            op: "render_instruction",
            detail: format!("label {class_label} out of range for task {:?} with {n} classes", t.id),
        });
    }
    let perm: Vec<usize> = match permutation {
        Some(p) => {
            let mut seen = vec![false; n];
            if p.len() != n || p.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
                return Err(TensorError::InvalidArg {
                    op: "render_instruction",
                    detail: format!("{p:?} is not a permutation of 0..{n}"),
                });
            }
            p.to_vec()
        }
        None => (0..n).collect(),
    };

    match &t.style {
        AnswerStyle::Labels(labels) => Ok(RenderedInstruction {
            prompt: format!("Question: {} Answer:", t.question),
            answer: format!(" {}", labels[class_label]),
            permutation: (0..n).collect(),
        }),
        AnswerStyle::Options(options) => {
            let mut prompt = format!("Question: {} Options:", t.question);
            for (slot, &class) in perm.iter().enumerate() {
                prompt.push_str(&format!(" ({}) {}.", OPTION_LETTERS[slot], options[class]));
            }
            prompt.push_str(" Answer:");
            let slot = perm.iter().position(|&c| c == class_label).expect("validated");
            Ok(RenderedInstruction {
                prompt,
                answer: format!(" ({})", OPTION_LETTERS[slot]),
                permutation: perm,
            })
        }
    }
}

/// Invert a rendering: which class does the answer at `slot` denote.
pub fn class_of_slot(permutation: &[usize], slot: usize) -> Option<usize> {
    permutation.get(slot).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_tasks_registered() {
        assert_eq!(TEMPLATES.len(), 6);
        for id in ["abnormal", "event", "emotion", "sleep", "workload", "slowing"] {
            assert!(template(id).is_some(), "{id} missing");
        }
        assert_eq!(task_classes("event"), Some(6));
        assert_eq!(task_classes("nope"), None);
    }

    #[test]
    fn abnormal_label_renders_yes() {
        let t = template("abnormal").unwrap();
        let r = render_instruction(t, 1, None).unwrap();
        assert_eq!(r.prompt, "Question: Is this EEG segment abnormal? Answer:");
        assert_eq!(r.answer, " Yes");
        let r0 = render_instruction(t, 0, None).unwrap();
        assert_eq!(r0.answer, " No");
    }

    #[test]
    fn options_render_in_canonical_order() {
        let t = template("slowing").unwrap();
        let r = render_instruction(t, 2, None).unwrap();
        assert_eq!(
            r.prompt,
            "Question: Which type does this EEG segment belong to? \
             Options: (A) background. (B) seizure. (C) slowing. Answer:"
        );
        assert_eq!(r.answer, " (C)");
    }

    #[test]
    fn shuffled_answer_tracks_the_class() {
        let t = template("slowing").unwrap();
        // slowing (class 2) moved to slot A
        let r = render_instruction(t, 2, Some(&[2, 0, 1])).unwrap();
        assert!(r.prompt.contains("(A) slowing."));
        assert_eq!(r.answer, " (A)");
        // inverting the permutation recovers the canonical class
        assert_eq!(class_of_slot(&r.permutation, 0), Some(2));
    }

    #[test]
    fn three_option_task_has_six_reachable_permutations() {
        use rand::seq::SliceRandom;
        use rand_chacha::rand_core::SeedableRng;
        let t = template("slowing").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let mut perm: Vec<usize> = (0..3).collect();
            perm.shuffle(&mut rng);
            let r = render_instruction(t, 0, Some(&perm)).unwrap();
            seen.insert(r.permutation.clone());
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let t = template("abnormal").unwrap();
        assert!(render_instruction(t, 2, None).is_err());
        let t = template("slowing").unwrap();
        assert!(render_instruction(t, 0, Some(&[0, 0, 1])).is_err());
        assert!(render_instruction(t, 0, Some(&[0, 1])).is_err());
    }
}
