//! JSON config loading with exhaustive error reporting.
//!
//! Every top-level field is checked on its own before the document is
//! deserialized as a whole, so one run lists all schema violations.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// A config type with a reference instance used to probe field types.
pub trait Schema: Serialize + DeserializeOwned {
    /// Fields without a default.
    const REQUIRED: &'static [&'static str];
    /// A complete, valid instance.
    fn reference() -> Self;
    /// Semantic checks after the schema passes.
    fn problems(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Reads `path` as a JSON object; `None` gives an empty object.
pub fn read_object(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    match value {
        Value::Object(m) => Ok(m),
        other => bail!("config {}: expected a JSON object, got {}", path.display(), kind(&other)),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// All schema and semantic problems of `doc`, one line per problem.
pub fn problems<T: Schema>(doc: &Map<String, Value>) -> Vec<String> {
    let reference = match serde_json::to_value(T::reference()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("reference configs serialize to objects"),
    };
    let mut out = Vec::new();
    for key in doc.keys() {
        if !reference.contains_key(key) {
            out.push(format!("{key}: unknown field"));
        }
    }
    for key in T::REQUIRED {
        if !doc.contains_key(*key) {
            out.push(format!("{key}: missing required field"));
        }
    }
    for (key, value) in doc {
        if !reference.contains_key(key) {
            continue;
        }
        let mut probe = reference.clone();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = serde_json::from_value::<T>(Value::Object(probe)) {
            out.push(format!("{key}: {e}"));
        }
    }
    if out.is_empty() {
        match serde_json::from_value::<T>(Value::Object(doc.clone())) {
            Ok(cfg) => out.extend(cfg.problems()),
            Err(e) => out.push(e.to_string()),
        }
    }
    out
}

/// Deserializes `doc`, or fails listing every problem found.
pub fn resolve<T: Schema>(doc: Map<String, Value>, what: &str) -> Result<T> {
    let found = problems::<T>(&doc);
    if !found.is_empty() {
        let mut msg = format!("invalid {what} config ({} problem{}):", found.len(), if found.len() == 1 { "" } else { "s" });
        for p in &found {
            msg.push_str("\n  - ");
            msg.push_str(p);
        }
        bail!(msg);
    }
    Ok(serde_json::from_value(Value::Object(doc))?)
}

/// Sets `key` when the flag was given; flags win over file values.
pub fn set<V: Serialize>(doc: &mut Map<String, Value>, key: &str, flag: Option<V>) -> Result<()> {
    if let Some(v) = flag {
        doc.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

mod impls {
    use super::Schema;
    use ctxdiff::verify::SuiteOptions;
    use ctxdiff::{
        AdapterSpec, DatasetSpec, DenoiserSpec, Generator, NelboOptions, SamplerConfig, ScheduleSpec, ToyModel,
        TrainConfig,
    };

    impl Schema for TrainConfig {
        const REQUIRED: &'static [&'static str] = &["dataset", "schedule", "adapter", "denoiser", "steps", "batch_size"];

        fn reference() -> Self {
            TrainConfig::new("data.csv", ScheduleSpec::cosine(100), AdapterSpec::Zero { dim: 2 }, DenoiserSpec::new(2, 2))
        }

        fn problems(&self) -> Vec<String> {
            TrainConfig::problems(self)
        }
    }

    impl Schema for DatasetSpec {
        const REQUIRED: &'static [&'static str] = &["generator", "count"];

        fn reference() -> Self {
            DatasetSpec {
                generator: Generator::ToyGaussian {
                    model: ToyModel::two_class(),
                },
                count: 0,
                seed: 0,
            }
        }

        fn problems(&self) -> Vec<String> {
            self.generator.validate().err().map(|e| e.to_string()).into_iter().collect()
        }
    }

    impl Schema for SamplerConfig {
        const REQUIRED: &'static [&'static str] = &[];

        fn reference() -> Self {
            SamplerConfig::default()
        }

        fn problems(&self) -> Vec<String> {
            self.timesteps(2).err().map(|e| e.to_string()).into_iter().collect()
        }
    }

    impl Schema for NelboOptions {
        const REQUIRED: &'static [&'static str] = &[];

        fn reference() -> Self {
            NelboOptions::default()
        }
    }

    impl Schema for SuiteOptions {
        const REQUIRED: &'static [&'static str] = &[];

        fn reference() -> Self {
            SuiteOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctxdiff::TrainConfig;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        match v {
            Value::Object(m) => m,
            _ => panic!("object expected"),
        }
    }

    #[test]
    fn every_problem_is_listed() {
        let doc = obj(json!({
            "schedule": {"kind": "cosine", "steps": "many"},
            "adapter": {"variant": "zero", "dim": 2},
            "denoiser": {"dim": 2, "classes": 2},
            "steps": -1,
            "colour": "blue",
        }));
        let found = problems::<TrainConfig>(&doc);
        let has = |p: &str| found.iter().any(|f| f.starts_with(p));
        assert!(has("colour: unknown field"), "{found:?}");
        assert!(has("dataset: missing required field"), "{found:?}");
        assert!(has("batch_size: missing required field"), "{found:?}");
        assert!(has("schedule: "), "{found:?}");
        assert!(has("steps: "), "{found:?}");
        assert_eq!(found.len(), 5, "{found:?}");
    }

    #[test]
    fn semantic_problems_follow_a_clean_schema() {
        let mut doc = obj(serde_json::to_value(TrainConfig::reference()).unwrap());
        doc.insert("batch_size".into(), json!(0));
        let found = problems::<TrainConfig>(&doc);
        assert!(found.iter().any(|f| f.contains("batch_size")), "{found:?}");
    }

    #[test]
    fn flags_override_file_values() {
        let mut doc = obj(json!({"seed": 1}));
        set(&mut doc, "seed", Some(9u64)).unwrap();
        set::<u64>(&mut doc, "steps", None).unwrap();
        assert_eq!(doc["seed"], json!(9));
        assert!(!doc.contains_key("steps"));
    }
}
