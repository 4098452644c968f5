use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;

/// Shared label space of the domain-adaptation setup, in id order.
pub const COMMON_CLASSES: [&str; 8] = ["road", "building", "vegetation", "sky", "pole", "light", "sign", "vehicle"];

const VKITTI: [(&str, Option<&str>); 14] = [
    ("terrain", None),
    ("sky", Some("sky")),
    ("tree", Some("vegetation")),
    ("vegetation", Some("vegetation")),
    ("building", Some("building")),
    ("road", Some("road")),
    ("guardrail", None),
    ("sign", Some("sign")),
    ("light", Some("light")),
    ("pole", Some("pole")),
    ("misc", None),
    ("truck", Some("vehicle")),
    ("car", Some("vehicle")),
    ("van", Some("vehicle")),
];

const CITYSCAPES: [(&str, Option<&str>); 16] = [
    ("road", Some("road")),
    ("sidewalk", None),
    ("building", Some("building")),
    ("wall", Some("vegetation")),
    ("fence", None),
    ("pole", Some("pole")),
    ("light", Some("light")),
    ("sign", Some("sign")),
    ("vegetation", Some("vegetation")),
    ("sky", Some("sky")),
    ("person", None),
    ("rider", None),
    ("car", Some("vehicle")),
    ("bus", Some("vehicle")),
    ("mbike", None),
    ("bike", None),
];

/// Relabels a source label set into a target label set by class name.
///
/// Source ids index `sources`; target ids index `targets`. `None` maps to
/// the ignore label. Every target name maps to itself, so mapping twice
/// (the second time with [`ClassMap::on_targets`]) changes nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    sources: Vec<String>,
    targets: Vec<String>,
    names: BTreeMap<String, Option<String>>,
}

impl ClassMap {
    pub fn new(sources: &[&str], pairs: &[(&str, Option<&str>)], targets: &[&str]) -> Result<Self> {
        if targets.len() >= IGNORE_LABEL as usize || sources.len() > IGNORE_LABEL as usize {
            return Err(Error::Config("too many classes for 8-bit labels".into()));
        }
        let mut names: BTreeMap<String, Option<String>> = BTreeMap::new();
        for (src, dst) in pairs {
            if let Some(d) = dst {
                if !targets.contains(d) {
                    return Err(Error::Config(format!("class map target `{d}` is not a target class")));
                }
            }
            if names.insert(src.to_string(), dst.map(str::to_string)).is_some() {
                return Err(Error::Config(format!("class `{src}` mapped twice")));
            }
        }
        for t in targets {
            match names.get(*t) {
                Some(Some(d)) if d != t => {
                    return Err(Error::Config(format!("target class `{t}` would map to `{d}`")));
                }
                Some(None) => return Err(Error::Config(format!("target class `{t}` would be ignored"))),
                _ => {
                    names.insert(t.to_string(), Some(t.to_string()));
                }
            }
        }
        if let Some(s) = sources.iter().find(|s| !names.contains_key(**s)) {
            return Err(Error::Config(format!("source class `{s}` has no mapping")));
        }
        Ok(Self {
            sources: sources.iter().map(|s| s.to_string()).collect(),
            targets: targets.iter().map(|s| s.to_string()).collect(),
            names,
        })
    }

    pub fn vkitti_to_common() -> Self {
        let sources: Vec<&str> = VKITTI.iter().map(|(s, _)| *s).collect();
        Self::new(&sources, &VKITTI, &COMMON_CLASSES).expect("built-in map is valid")
    }

    pub fn cityscapes_to_common() -> Self {
        let sources: Vec<&str> = CITYSCAPES.iter().map(|(s, _)| *s).collect();
        Self::new(&sources, &CITYSCAPES, &COMMON_CLASSES).expect("built-in map is valid")
    }

    /// The same name map reading target ids as its source ids.
    pub fn on_targets(&self) -> Self {
        Self { sources: self.targets.clone(), ..self.clone() }
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    /// Target name of `name`, `None` for ignored classes.
    pub fn map_name(&self, name: &str) -> Result<Option<&str>> {
        self.names
            .get(name)
            .map(|d| d.as_deref())
            .ok_or_else(|| Error::Config(format!("class `{name}` is not in the class map")))
    }

    pub fn target_id(&self, name: &str) -> Option<u8> {
        self.targets.iter().position(|t| t == name).map(|i| i as u8)
    }

    /// Target id for each source id.
    pub fn lookup(&self) -> Vec<u8> {
        self.sources
            .iter()
            .map(|s| match self.names[s].as_deref() {
                Some(t) => self.target_id(t).expect("targets are checked on construction"),
                None => IGNORE_LABEL,
            })
            .collect()
    }
}

/// Relabels `seg` through `map`. Ignore labels pass through unchanged.
pub fn apply_class_map(seg: &[u8], map: &ClassMap) -> Result<Vec<u8>> {
    let table = map.lookup();
    seg.iter()
        .map(|&s| {
            if s == IGNORE_LABEL {
                Ok(IGNORE_LABEL)
            } else {
                table.get(s as usize).copied().ok_or(Error::UnknownClass(s as u32))
            }
        })
        .collect()
}
