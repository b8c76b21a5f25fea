//! Canonical 10-20 electrode names with stable integer ids.
//!
//! The table is append-only: ids are positional and must never be reordered
//! or removed, so checkpoints and recordings stay compatible across
//! versions.

/// Canonical channel names. Index = channel id.
pub const CHANNELS: &[&str] = &[
    "FP1", "FP2", "F7", "F3", "FZ", "F4", "F8", // frontal
    "T3", "C3", "CZ", "C4", "T4", // central / temporal
    "T5", "P3", "PZ", "P4", "T6", // parietal
    "O1", "O2", // occipital
    "A1", "A2", "FPZ", "OZ", // references / midline extras
    "T7", "T8", "P7", "P8", // modern names for T3/T4/T5/T6 sites
];

/// Stable id for a canonical channel name (case-insensitive).
pub fn channel_id(name: &str) -> Option<u16> {
    let upper = name.to_ascii_uppercase();
    CHANNELS.iter().position(|&c| c == upper).map(|i| i as u16)
}

pub fn channel_name(id: u16) -> Option<&'static str> {
    CHANNELS.get(id as usize).copied()
}

pub fn is_known(name: &str) -> bool {
    channel_id(name).is_some()
}
