use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evalkit::SequenceAsr;
use crate::harness::config::SequenceSuiteSpec;
use crate::scenegen::{
    generate_sequence, mix_seed, BrightnessCode, ClassCatalog, FactorSettings, SceneSequence,
};

/// One held-out trigger sequence and the conditions it was filmed under.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSequence {
    pub id: String,
    pub brightness: BrightnessCode,
    pub far: bool,
    pub sequence: SceneSequence,
}

impl AttackSequence {
    /// Low light or long distance: the conditions hard-case augmentation targets.
    pub fn is_hard(&self) -> bool {
        self.brightness.is_dim() || self.far
    }
}

/// Ten sequences: each brightness code once near and once far.
pub fn attack_suite(
    spec: &SequenceSuiteSpec,
    seed: u64,
    catalog: &ClassCatalog,
) -> Result<Vec<AttackSequence>> {
    let (lo, hi) = spec.n_persons;
    if lo == 0 || lo > hi {
        return Err(Error::Config("sequence n_persons must be a range starting at 1 or more".into()));
    }
    let mut out = Vec::with_capacity(2 * BrightnessCode::ALL.len());
    for (i, &brightness) in BrightnessCode::ALL.iter().enumerate() {
        for far in [false, true] {
            let k = 2 * i + far as usize;
            let (d0, d1) = if far { spec.far_distance } else { spec.near_distance };
            let (a0, a1) = if k % 2 == 0 {
                spec.angle_deg
            } else {
                (spec.angle_deg.1, spec.angle_deg.0)
            };
            let n_persons = lo + (k as u32) % (hi - lo + 1);
            let start = FactorSettings {
                brightness,
                distance_scale: d0,
                angle_deg: a0,
                occlusion_frac: 0.0,
                n_persons,
                n_triggers: 1,
                n_others: spec.n_others,
                n_decoys: 0,
            };
            let end = FactorSettings {
                distance_scale: d1,
                angle_deg: a1,
                ..start
            };
            let sequence = generate_sequence(mix_seed(seed, k as u64), &start, &end, spec.frames, catalog)?;
            out.push(AttackSequence {
                id: format!("seq{k:02}_{brightness}_{}", if far { "far" } else { "near" }),
                brightness,
                far,
                sequence,
            });
        }
    }
    Ok(out)
}

/// Mean ASR per sequence group, keyed `asr.<group>`. Groups: every
/// brightness code, `near`, `far`, `dim` (C/D), `hard` (dim or far) and
/// `regular` (the rest). Rows without an ASR are skipped.
pub fn group_means(rows: &[SequenceAsr], suite: &[AttackSequence]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in rows {
        let (Some(v), Some(seq)) = (row.asr, suite.iter().find(|s| s.id == row.sequence_id)) else {
            continue;
        };
        let mut groups = vec![
            format!("brightness.{}", seq.brightness),
            if seq.far { "far" } else { "near" }.to_string(),
            if seq.is_hard() { "hard" } else { "regular" }.to_string(),
        ];
        if seq.brightness.is_dim() {
            groups.push("dim".into());
        }
        for g in groups {
            let e = acc.entry(format!("asr.{g}")).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_suite() -> Vec<AttackSequence> {
        let spec = SequenceSuiteSpec {
            frames: 4,
            ..SequenceSuiteSpec::default()
        };
        attack_suite(&spec, 3, &ClassCatalog::base()).unwrap()
    }

    #[test]
    fn suite_covers_every_condition_with_one_trigger_per_frame() {
        let suite = small_suite();
        assert_eq!(suite.len(), 10);
        for code in BrightnessCode::ALL {
            assert_eq!(suite.iter().filter(|s| s.brightness == code).count(), 2);
        }
        assert_eq!(suite.iter().filter(|s| s.is_hard()).count(), 7);
        for s in &suite {
            assert_eq!(s.sequence.frames.len(), 4);
            assert!(s.sequence.frames.iter().all(|f| f.trigger_count() == 1), "{}", s.id);
        }
        let d: Vec<f64> = suite.iter().flat_map(|s| s.sequence.trajectory.iter().map(|f| f.distance_scale)).collect();
        assert_eq!(d.iter().cloned().fold(f64::INFINITY, f64::min), 0.3);
        assert_eq!(d.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn group_means_average_per_group() {
        let suite = small_suite();
        let rows: Vec<SequenceAsr> = suite
            .iter()
            .map(|s| SequenceAsr {
                sequence_id: s.id.clone(),
                angle: String::new(),
                brightness: s.brightness.to_string(),
                distance: String::new(),
                n_persons: 1,
                n_frames: 4,
                successes: 0,
                asr: Some(if s.is_hard() { 1.0 } else { 0.0 }),
            })
            .collect();
        let g = group_means(&rows, &suite);
        assert_eq!(g["asr.hard"], 1.0);
        assert_eq!(g["asr.regular"], 0.0);
        assert_eq!(g["asr.far"], 1.0);
        assert_eq!(g["asr.brightness.C"], 1.0);
        assert_eq!(g["asr.brightness.A"], 0.5);
    }
}
