use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NetError;

/// Round-trip characteristics of one directed link. Each leg of a
/// request/reply exchange is delayed by `(base_ms + U(0, jitter_ms)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub base_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinkEntry {
    src: String,
    dst: String,
    base_ms: f64,
    #[serde(default)]
    jitter_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixFile {
    default_ms: f64,
    #[serde(default)]
    links: Vec<LinkEntry>,
}

/// Pairwise latency table. Lookups try the exact direction, then the
/// reverse direction, so a single entry describes a symmetric link while two
/// entries model an asymmetric one.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMatrix {
    default_ms: f64,
    links: BTreeMap<(String, String), Link>,
}

impl Default for LatencyMatrix {
    fn default() -> Self {
        LatencyMatrix::new(0.0).expect("zero default is valid")
    }
}

impl LatencyMatrix {
    pub fn new(default_ms: f64) -> Result<Self, NetError> {
        if !(default_ms >= 0.0) {
            return Err(NetError::Config(format!("default_ms must be >= 0, got {default_ms}")));
        }
        Ok(LatencyMatrix {
            default_ms,
            links: BTreeMap::new(),
        })
    }

    pub fn default_ms(&self) -> f64 {
        self.default_ms
    }

    pub fn set(&mut self, src: &str, dst: &str, base_ms: f64, jitter_ms: f64) -> Result<(), NetError> {
        if !(base_ms >= 0.0) || !(jitter_ms >= 0.0) {
            return Err(NetError::Config(format!(
                "link {src}->{dst}: base_ms and jitter_ms must be >= 0"
            )));
        }
        self.links.insert((src.to_string(), dst.to_string()), Link { base_ms, jitter_ms });
        Ok(())
    }

    pub fn with(mut self, src: &str, dst: &str, base_ms: f64) -> Self {
        self.set(src, dst, base_ms, 0.0).expect("valid link");
        self
    }

    pub fn lookup(&self, src: &str, dst: &str) -> Link {
        if let Some(l) = self.links.get(&(src.to_string(), dst.to_string())) {
            return *l;
        }
        if let Some(l) = self.links.get(&(dst.to_string(), src.to_string())) {
            return *l;
        }
        if src == dst {
            return Link { base_ms: 0.0, jitter_ms: 0.0 };
        }
        Link {
            base_ms: self.default_ms,
            jitter_ms: 0.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let file: MatrixFile = serde_json::from_str(text).map_err(|e| NetError::Config(e.to_string()))?;
        let mut m = LatencyMatrix::new(file.default_ms)?;
        for l in file.links {
            m.set(&l.src, &l.dst, l.base_ms, l.jitter_ms)?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path).map_err(|e| NetError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = MatrixFile {
            default_ms: self.default_ms,
            links: self
                .links
                .iter()
                .map(|((src, dst), l)| LinkEntry {
                    src: src.clone(),
                    dst: dst.clone(),
                    base_ms: l.base_ms,
                    jitter_ms: l.jitter_ms,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("matrix serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_fallbacks() {
        let mut m = LatencyMatrix::new(50.0).unwrap();
        m.set("a", "b", 10.0, 2.0).unwrap();
        m.set("c", "a", 7.0, 0.0).unwrap();
        m.set("a", "c", 9.0, 0.0).unwrap();
        assert_eq!(m.lookup("a", "b").base_ms, 10.0);
        assert_eq!(m.lookup("b", "a").base_ms, 10.0);
        assert_eq!(m.lookup("a", "c").base_ms, 9.0);
        assert_eq!(m.lookup("c", "a").base_ms, 7.0);
        assert_eq!(m.lookup("x", "y").base_ms, 50.0);
        assert_eq!(m.lookup("x", "x").base_ms, 0.0);
    }

    #[test]
    fn rejects_negative() {
        assert!(LatencyMatrix::new(-1.0).is_err());
        let mut m = LatencyMatrix::default();
        assert!(m.set("a", "b", -1.0, 0.0).is_err());
        assert!(m.set("a", "b", 1.0, f64::NAN).is_err());
    }

    #[test]
    fn file_format() {
        let text = r#"{"default_ms": 30.0, "links": [{"src": "c1", "dst": "v1", "base_ms": 14, "jitter_ms": 1.5}]}"#;
        let m = LatencyMatrix::from_json(text).unwrap();
        assert_eq!(m.lookup("v1", "c1"), Link { base_ms: 14.0, jitter_ms: 1.5 });
        let again = LatencyMatrix::from_json(&m.to_json()).unwrap();
        assert_eq!(again, m);
    }
}
