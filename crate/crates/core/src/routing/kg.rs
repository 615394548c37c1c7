//! Labeled knowledge graph over primitive ids and type names.
//!
//! Text format, one edge per line: `edge <src> <dst> <label> <weight>`.
//! Blank lines and lines starting with `#` are ignored; `entity <name>`
//! declares an isolated entity.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RoutingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    Compatible,
    Incompatible,
    Subsumes,
    Entails,
}

impl EdgeLabel {
    pub fn name(self) -> &'static str {
        match self {
            EdgeLabel::Compatible => "compatible",
            EdgeLabel::Incompatible => "incompatible",
            EdgeLabel::Subsumes => "subsumes",
            EdgeLabel::Entails => "entails",
        }
    }
}

impl FromStr for EdgeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "compatible" => Ok(EdgeLabel::Compatible),
            "incompatible" => Ok(EdgeLabel::Incompatible),
            "subsumes" => Ok(EdgeLabel::Subsumes),
            "entails" => Ok(EdgeLabel::Entails),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEdge {
    pub src: String,
    pub dst: String,
    pub label: EdgeLabel,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: BTreeSet<String>,
    edges: Vec<KgEdge>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str) {
        self.entities.insert(name.to_string());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entities.contains(name)
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    /// Adds or replaces the edge `(src, dst, label)`.
    pub fn add_edge(&mut self, src: &str, dst: &str, label: EdgeLabel, weight: f64) -> Result<(), RoutingError> {
        if src == dst {
            return Err(RoutingError::Kg {
                line: 0,
                msg: format!("self-loop on `{src}`"),
            });
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(RoutingError::Kg {
                line: 0,
                msg: format!("weight {weight} outside [0,1]"),
            });
        }
        self.add_entity(src);
        self.add_entity(dst);
        self.remove_edge(src, dst, label);
        self.edges.push(KgEdge {
            src: src.into(),
            dst: dst.into(),
            label,
            weight,
        });
        Ok(())
    }

    pub fn remove_edge(&mut self, src: &str, dst: &str, label: EdgeLabel) -> bool {
        let before = self.edges.len();
        self.edges.retain(|e| !(e.src == src && e.dst == dst && e.label == label));
        self.edges.len() != before
    }

    pub fn is_incompatible(&self, src: &str, dst: &str) -> bool {
        self.edges
            .iter()
            .any(|e| e.src == src && e.dst == dst && e.label == EdgeLabel::Incompatible)
    }

    /// Strongest supporting (non-incompatible) edge weight from `src` to `dst`.
    pub fn support(&self, src: &str, dst: &str) -> f64 {
        self.edges
            .iter()
            .filter(|e| e.src == src && e.dst == dst && e.label != EdgeLabel::Incompatible)
            .map(|e| e.weight)
            .fold(0.0, f64::max)
    }

    /// Direct support plus half the summed two-hop support, clamped to [0,1].
    pub fn consistency(&self, src: &str, dst: &str) -> f64 {
        let direct = self.support(src, dst);
        let two_hop: f64 = self
            .edges
            .iter()
            .filter(|e| e.src == src && e.label != EdgeLabel::Incompatible && e.dst != dst)
            .map(|e| e.weight * self.support(&e.dst, dst))
            .sum();
        (direct + 0.5 * two_hop).min(1.0)
    }

    pub fn parse(text: &str) -> Result<Self, RoutingError> {
        let mut kg = KnowledgeGraph::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let err = |msg: String| RoutingError::Kg { line, msg };
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            match f.as_slice() {
                ["entity", name] => kg.add_entity(name),
                ["edge", src, dst, label, weight] => {
                    let label: EdgeLabel = label.parse().map_err(err)?;
                    let weight: f64 = weight.parse().map_err(|_| err(format!("bad weight `{weight}`")))?;
                    kg.add_edge(src, dst, label, weight).map_err(|e| match e {
                        RoutingError::Kg { msg, .. } => err(msg),
                        other => other,
                    })?;
                }
                _ => return Err(err(format!("unrecognized line `{t}`"))),
            }
        }
        Ok(kg)
    }
}

impl fmt::Display for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let used: BTreeSet<&str> = self.edges.iter().flat_map(|e| [e.src.as_str(), e.dst.as_str()]).collect();
        for e in &self.entities {
            if !used.contains(e.as_str()) {
                writeln!(f, "entity {e}")?;
            }
        }
        for e in &self.edges {
            writeln!(f, "edge {} {} {} {}", e.src, e.dst, e.label.name(), e.weight)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let src = "# demo\nentity lonely\nedge a b compatible 0.5\nedge b c entails 1\nedge a c incompatible 1\n";
        let kg = KnowledgeGraph::parse(src).unwrap();
        assert!(kg.is_incompatible("a", "c"));
        assert!(!kg.is_incompatible("c", "a"));
        assert_eq!(KnowledgeGraph::parse(&kg.to_string()).unwrap(), kg);
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = KnowledgeGraph::parse("edge a b compatible 0.5\nedge a a compatible 0.5").unwrap_err();
        assert!(matches!(e, RoutingError::Kg { line: 2, .. }));
        let e = KnowledgeGraph::parse("edge a b friendly 0.5").unwrap_err();
        assert!(matches!(e, RoutingError::Kg { line: 1, .. }));
        assert!(KnowledgeGraph::parse("edge a b compatible 1.5").is_err());
    }

    #[test]
    fn two_hop_consistency() {
        let mut kg = KnowledgeGraph::new();
        kg.add_edge("a", "b", EdgeLabel::Compatible, 0.8).unwrap();
        kg.add_edge("b", "c", EdgeLabel::Entails, 0.5).unwrap();
        assert!((kg.consistency("a", "c") - 0.2).abs() < 1e-15);
        assert_eq!(kg.consistency("a", "b"), 0.8);
        assert_eq!(kg.consistency("c", "a"), 0.0);
    }
}
