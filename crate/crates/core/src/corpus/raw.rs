//! Pre-decompiled, pre-aligned functions as they arrive in the input corpus.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::typelib::{DataLayout, COMPONENT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVariable {
    pub decompiler_name: String,
    /// Indices into the function's token list.
    pub occurrences: Vec<usize>,
    pub layout: DataLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompiler_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFunction {
    pub binary_id: String,
    pub function_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<String>,
    pub tokens: Vec<String>,
    pub variables: Vec<RawVariable>,
}

impl RawFunction {
    pub fn key(&self) -> String {
        format!("{}/{}", self.binary_id, self.function_id)
    }

    /// Occurrences are in range, name the variable, and are not shared.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::InvalidFunction {
            function: self.key(),
            message,
        };
        let mut owner: Vec<Option<usize>> = vec![None; self.tokens.len()];
        for (vi, v) in self.variables.iter().enumerate() {
            if v.decompiler_name.is_empty() {
                return Err(err(format!("variable {vi} has an empty decompiler name")));
            }
            for &i in &v.occurrences {
                let tok = self
                    .tokens
                    .get(i)
                    .ok_or_else(|| err(format!("variable {vi} occurrence {i} out of range")))?;
                if *tok != v.decompiler_name {
                    return Err(err(format!(
                        "variable {vi} occurrence {i} is `{tok}`, expected `{}`",
                        v.decompiler_name
                    )));
                }
                if let Some(prev) = owner[i].replace(vi) {
                    if prev != vi {
                        return Err(err(format!("token {i} claimed by variables {prev} and {vi}")));
                    }
                }
            }
            if v.layout.offsets.first().is_some_and(|&o| o != 0) {
                return Err(err(format!("variable {vi} layout offsets must start at 0")));
            }
        }
        Ok(())
    }

    pub fn has_decompiler_types(&self) -> bool {
        self.variables.iter().all(|v| v.decompiler_type.is_some())
    }
}

pub fn is_component(v: &RawVariable) -> bool {
    v.gold_type.as_deref() == Some(COMPONENT)
}

/// Marks variables without any gold label as `<Component>`.
pub fn label_components(mut raw: RawFunction) -> RawFunction {
    for v in &mut raw.variables {
        if v.gold_type.is_none() && v.gold_name.is_none() {
            v.gold_type = Some(COMPONENT.to_string());
        }
    }
    raw
}

/// A function is kept for training only if some variable needs renaming or
/// retyping, i.e. is not a `<Component>`.
pub fn needs_prediction(raw: &RawFunction) -> bool {
    raw.variables.iter().any(|v| !is_component(v))
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawFunction>> {
    let fns: Vec<RawFunction> = io::read_jsonl(path)?;
    for f in &fns {
        f.validate()?;
    }
    Ok(fns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::typelib::Location;

    fn var(name: &str, occ: &[usize], gold: Option<(&str, &str)>) -> RawVariable {
        RawVariable {
            decompiler_name: name.into(),
            occurrences: occ.to_vec(),
            layout: DataLayout {
                location: Location::Stack(8),
                size: 4,
                offsets: vec![0],
            },
            decompiler_type: None,
            gold_type: gold.map(|g| g.0.to_string()),
            gold_name: gold.map(|g| g.1.to_string()),
        }
    }

    fn func(vars: Vec<RawVariable>) -> RawFunction {
        RawFunction {
            binary_id: "b".into(),
            function_id: "f".into(),
            opt_level: None,
            tokens: ["v1", "=", "v2", "+", "v1"].map(String::from).to_vec(),
            variables: vars,
        }
    }

    #[test]
    fn components_are_labeled_and_functions_filtered() {
        let f = label_components(func(vec![var("v1", &[0, 4], Some(("int", "i"))), var("v2", &[2], None)]));
        assert_eq!(f.variables[0].gold_type.as_deref(), Some("int"));
        assert!(is_component(&f.variables[1]));
        assert!(needs_prediction(&f));

        let all = label_components(func(vec![var("v1", &[0, 4], None), var("v2", &[2], None)]));
        assert!(all.variables.iter().all(is_component));
        assert!(!needs_prediction(&all));
    }

    #[test]
    fn validation_catches_bad_occurrences() {
        assert!(func(vec![var("v1", &[0, 4], None)]).validate().is_ok());
        assert!(func(vec![var("v1", &[1], None)]).validate().is_err());
        assert!(func(vec![var("v1", &[9], None)]).validate().is_err());
        assert!(func(vec![var("v1", &[0], None), var("v1", &[0], None)]).validate().is_err());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = r#"{"binary_id":"b","function_id":"f","tokens":[],"variables":[{"decompiler_name":"v1","occurrences":[0],"layout":{"location":{"stack":"x"},"size":4,"offsets":[0]}}]}"#;
        let err = crate::io::from_json_str::<RawFunction>("req", text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("variables[0].layout.location"), "{msg}");
    }
}
