//! Freeze-discipline verification from checkpoints alone.

use std::collections::BTreeMap;

use crate::model::GroupTag;
use crate::numerics::Real;
use crate::persist::Checkpoint;

/// Re-verify every audit record in a checkpoint: a parameter whose group was
/// not trainable during a phase must carry identical content hashes before
/// and after it. Returns human-readable violations (empty = clean).
pub fn verify_freeze_audit<T: Real>(checkpoint: &Checkpoint<T>) -> Vec<String> {
    let tags: BTreeMap<&str, &GroupTag> = checkpoint
        .params
        .iter()
        .map(|(name, tag, _, _)| (name.as_str(), tag))
        .collect();
    let mut violations = Vec::new();
    for record in &checkpoint.audit {
        for (name, before) in &record.hashes_before {
            let Some(after) = record.hashes_after.get(name) else {
                continue; // parameter removed mid-phase; nothing to verify
            };
            let Some(tag) = tags.get(name.as_str()) else {
                violations.push(format!(
                    "phase `{}`: parameter `{name}` appears in the audit but not in the checkpoint",
                    record.phase
                ));
                continue;
            };
            let frozen = !record.trainable.contains(tag);
            if frozen && before != after {
                violations.push(format!(
                    "phase `{}`: frozen parameter `{name}` (group {tag}) changed",
                    record.phase
                ));
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::AuditRecord;

    #[test]
    fn detects_a_frozen_parameter_that_moved() {
        // Hand-built checkpoint-shaped data: one frozen param that changed.
        let mut before = BTreeMap::new();
        before.insert("w".to_string(), "aaaa".to_string());
        let mut after = BTreeMap::new();
        after.insert("w".to_string(), "bbbb".to_string());
        let record = AuditRecord {
            phase: "step2".into(),
            trainable: vec![GroupTag::Adapters],
            step_range: (0, 5),
            hashes_before: before,
            hashes_after: after,
        };
        let checkpoint = Checkpoint::<f32> {
            config: crate::model::ModelConfig::desk_default(),
            active_language: crate::tokenize::LanguageId::new("L1").unwrap(),
            n_classes: None,
            noise_sigma: 0.0,
            provenance: Default::default(),
            vocabs: BTreeMap::new(),
            params: vec![(
                "w".to_string(),
                GroupTag::Body,
                false,
                crate::numerics::Tensor::zeros(vec![1]),
            )],
            extra_tensors: BTreeMap::new(),
            audit: vec![record],
            extra: serde_json::Value::Null,
        };
        let violations = verify_freeze_audit(&checkpoint);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("frozen parameter `w`"), "{violations:?}");
    }
}
