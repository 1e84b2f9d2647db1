//! Source-name to canonical-name rewriting, shipped as data.
//!
//! A rule's `source` is a literal name with placeholders: `{x}` matches a run
//! of digits (rendered without leading zeros in the target) and `{x:any}`
//! matches any non-empty text. Every source name must match exactly one rule
//! and no two sources may map to the same target.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout rewrite applied to a tensor when it is renamed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// `[kh, kw, in, out]` to `[out, in, kh, kw]`.
    HwioToOihw,
    /// Drops singleton axes of a per-channel vector (`[1, 1, 1, C]` to `[C]`).
    Flatten,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub transform: Transform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NameMapFile {
    name: String,
    version: u32,
    #[serde(default)]
    norm_kind: Option<String>,
    #[serde(default)]
    description: Option<String>,
    rules: Vec<RuleSpec>,
}

#[derive(Debug, Clone)]
struct Rule {
    spec: RuleSpec,
    re: Regex,
    numeric: Vec<String>,
}

/// Ordered list of rename rules.
#[derive(Debug, Clone)]
pub struct NameMap {
    pub name: String,
    pub version: u32,
    /// Norm kind of archives this map describes, recorded into checkpoint meta.
    pub norm_kind: Option<String>,
    rules: Vec<Rule>,
}

/// A resolved rename for one source tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mapped {
    pub source: String,
    pub target: String,
    pub transform: Transform,
}

const BIT_RESNET_V2: &str = include_str!("../../data/namemap_bit_resnet_v2.json");

fn compile(spec: &RuleSpec) -> Result<Rule> {
    let ph = Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)(:any)?\}").expect("static regex");
    let mut pattern = String::from("^");
    let mut numeric = Vec::new();
    let mut last = 0;
    for cap in ph.captures_iter(&spec.source) {
        let m = cap.get(0).expect("match");
        pattern.push_str(&regex::escape(&spec.source[last..m.start()]));
        let name = &cap[1];
        if cap.get(2).is_some() {
            pattern.push_str(&format!("(?P<{name}>.+)"));
        } else {
            pattern.push_str(&format!("(?P<{name}>[0-9]+)"));
            numeric.push(name.to_string());
        }
        last = m.end();
    }
    pattern.push_str(&regex::escape(&spec.source[last..]));
    pattern.push('$');
    let re = Regex::new(&pattern).map_err(|e| Error::NameMap(format!("bad rule `{}`: {e}", spec.source)))?;
    Ok(Rule {
        spec: spec.clone(),
        re,
        numeric,
    })
}

impl NameMap {
    pub fn from_rules(name: &str, rules: Vec<RuleSpec>) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            version: 1,
            norm_kind: None,
            rules: rules.iter().map(compile).collect::<Result<_>>()?,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: NameMapFile =
            serde_json::from_str(text).map_err(|e| Error::NameMap(format!("bad name map file: {e}")))?;
        let mut m = Self::from_rules(&f.name, f.rules)?;
        m.version = f.version;
        m.norm_kind = f.norm_kind;
        Ok(m)
    }

    /// Maps every name to itself.
    pub fn identity() -> Self {
        Self::from_rules(
            "identity",
            vec![RuleSpec {
                source: "{name:any}".into(),
                target: "{name}".into(),
                transform: Transform::None,
            }],
        )
        .expect("static rule")
    }

    /// Released BiT ResNet-V2 archives.
    pub fn bit_resnet_v2() -> Self {
        Self::from_json(BIT_RESNET_V2).expect("bundled name map parses")
    }

    pub fn rules(&self) -> impl Iterator<Item = &RuleSpec> {
        self.rules.iter().map(|r| &r.spec)
    }

    fn apply_rule(rule: &Rule, name: &str) -> Option<String> {
        let caps = rule.re.captures(name)?;
        let mut out = rule.spec.target.clone();
        for group in rule.re.capture_names().flatten() {
            let v = &caps[group];
            let rendered = if rule.numeric.iter().any(|n| n == group) {
                v.parse::<u64>().map(|n| n.to_string()).unwrap_or_else(|_| v.to_string())
            } else {
                v.to_string()
            };
            out = out.replace(&format!("{{{group}}}"), &rendered);
        }
        Some(out)
    }

    /// Resolves all names, or fails listing every unmatched, ambiguous or
    /// colliding source name.
    pub fn resolve<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<Mapped>> {
        let mut out = Vec::new();
        let mut unmatched = Vec::new();
        let mut ambiguous = Vec::new();
        let mut targets: std::collections::HashMap<String, String> = Default::default();
        let mut collisions = Vec::new();
        for name in names {
            let hits: Vec<(String, Transform)> = self
                .rules
                .iter()
                .filter_map(|r| Self::apply_rule(r, name).map(|t| (t, r.spec.transform)))
                .collect();
            match hits.as_slice() {
                [] => unmatched.push(name.to_string()),
                [(target, transform)] => {
                    if let Some(prev) = targets.insert(target.clone(), name.to_string()) {
                        collisions.push(format!("`{prev}` and `{name}` both map to `{target}`"));
                    }
                    out.push(Mapped {
                        source: name.to_string(),
                        target: target.clone(),
                        transform: *transform,
                    });
                }
                _ => ambiguous.push(name.to_string()),
            }
        }
        if unmatched.is_empty() && ambiguous.is_empty() && collisions.is_empty() {
            return Ok(out);
        }
        let mut parts = Vec::new();
        if !unmatched.is_empty() {
            parts.push(format!("unmatched: {}", unmatched.join(", ")));
        }
        if !ambiguous.is_empty() {
            parts.push(format!("matched by several rules: {}", ambiguous.join(", ")));
        }
        if !collisions.is_empty() {
            parts.push(format!("not injective: {}", collisions.join("; ")));
        }
        Err(Error::NameMap(parts.join(" | ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_map_resolves_unit_names() {
        let m = NameMap::bit_resnet_v2();
        let r = m
            .resolve([
                "resnet/block2/unit03/b/standardized_conv2d/kernel",
                "resnet/block1/unit01/a/group_norm/gamma",
                "resnet/root_block/standardized_conv2d/kernel",
                "resnet/head/conv2d/bias",
            ])
            .unwrap();
        assert_eq!(r[0].target, "block2.unit3.conv2.weight");
        assert_eq!(r[0].transform, Transform::HwioToOihw);
        assert_eq!(r[1].target, "block1.unit1.norm1.gamma");
        assert_eq!(r[2].target, "stem.conv.weight");
        assert_eq!(r[3].target, "head.bias");
    }

    #[test]
    fn unmatched_names_all_reported() {
        let m = NameMap::bit_resnet_v2();
        let err = m.resolve(["resnet/foo", "resnet/group_norm/gamma", "bar"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("resnet/foo") && msg.contains("bar"));
    }

    #[test]
    fn collisions_reported() {
        let m = NameMap::from_rules(
            "t",
            vec![RuleSpec {
                source: "x{i}".into(),
                target: "y{i}".into(),
                transform: Transform::None,
            }],
        )
        .unwrap();
        let err = m.resolve(["x1", "x01"]).unwrap_err();
        assert!(err.to_string().contains("not injective"));
    }

    #[test]
    fn overlapping_rules_are_ambiguous() {
        let m = NameMap::from_rules(
            "t",
            vec![
                RuleSpec {
                    source: "a.{n:any}".into(),
                    target: "x.{n}".into(),
                    transform: Transform::None,
                },
                RuleSpec {
                    source: "a.b".into(),
                    target: "y".into(),
                    transform: Transform::None,
                },
            ],
        )
        .unwrap();
        assert!(m.resolve(["a.b"]).unwrap_err().to_string().contains("several"));
    }
}
