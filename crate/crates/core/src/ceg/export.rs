//! DOT, JSON and trace CSV output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Ceg, CegError, Trace};

pub const TRACE_HEADER: &str = "step,node,index,value";
const DOC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CegDoc {
    version: u32,
    ceg: Ceg,
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl Ceg {
    /// Causal edges solid with weight labels, data edges dashed.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph ceg {\n");
        for n in &self.nodes {
            let shape = if self.outputs.iter().any(|&o| self.nodes[o].id == n.id) { "doublecircle" } else { "ellipse" };
            let label = format!("{}:{}", n.id, n.prim.layer.name());
            let _ = writeln!(s, "  {} [label={}, shape={shape}];", quote(&n.id), quote(&label));
        }
        for e in &self.data_edges {
            let _ = writeln!(s, "  {} -> {} [style=dashed];", quote(&self.nodes[e.src].id), quote(&self.nodes[e.dst].id));
        }
        for e in &self.causal_edges {
            let _ = writeln!(
                s,
                "  {} -> {} [style=solid, label=\"{:.3}\"];",
                quote(&self.nodes[e.src].id),
                quote(&self.nodes[e.dst].id),
                e.weight
            );
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&CegDoc {
            version: DOC_VERSION,
            ceg: self.clone(),
        })
        .expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Ceg, CegError> {
        let doc: CegDoc = serde_json::from_str(s).map_err(|e| CegError::Json(e.to_string()))?;
        if doc.version != DOC_VERSION {
            return Err(CegError::Version(doc.version));
        }
        doc.ceg.validate()?;
        Ok(doc.ceg)
    }
}

impl Trace {
    /// One row per (step, node, value index).
    pub fn to_csv(&self, g: &Ceg) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for (t, state) in self.states.iter().enumerate() {
            for (i, v) in state.iter().enumerate() {
                for (k, x) in v.iter().enumerate() {
                    let _ = writeln!(s, "{t},{},{k},{x}", g.nodes[i].id);
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use crate::ceg::{random_dag, Ceg};

    #[test]
    fn json_round_trip_and_dot() {
        let g = random_dag(3);
        assert_eq!(Ceg::from_json(&g.to_json()).unwrap(), g);
        let dot = g.to_dot();
        assert_eq!(dot.matches("style=dashed").count(), g.data_edges.len());
        assert_eq!(dot.matches("style=solid").count(), g.causal_edges.len());
        assert!(dot.contains(":Phys"));
        let bad = g.to_json().replace("\"version\":1", "\"version\":9");
        assert!(Ceg::from_json(&bad).is_err());
    }

    #[test]
    fn trace_csv_has_one_row_per_value() {
        let g = random_dag(4);
        let x0 = g.random_sources(&mut crate::numerics::rng(0));
        let t = g.execute(&x0, None).unwrap();
        let csv = t.to_csv(&g);
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, t.states.len() * g.nodes.len() * 2);
        assert!(csv.starts_with(super::TRACE_HEADER));
    }
}
