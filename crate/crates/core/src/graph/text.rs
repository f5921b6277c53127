//! Plain-text topology exchange format.
//!
//! ```text
//! n=4
//! 0 1 1
//! 0 2 0.5
//! 1 2 -0.25
//! ```
//!
//! First line gives the node count; each following line is `from to alpha`
//! in `(to, from)` lexicographic order. Alphas use the shortest decimal form
//! that parses back to the same `f32`, so the format round-trips exactly.

use std::fmt::Write as _;

use super::{AlphaMatrix, Graph, GraphError, Result};

/// Renders `graph` with weights from `alpha`, or weight 1 when absent.
pub fn to_text(graph: &Graph, alpha: Option<&AlphaMatrix>) -> String {
    let mut out = format!("n={}\n", graph.n_nodes());
    for e in graph.edges() {
        let a = alpha.map_or(1.0, |a| a.get(e.from, e.to));
        writeln!(out, "{} {} {}", e.from, e.to, a).unwrap();
    }
    out
}

pub fn parse_text(text: &str) -> Result<(Graph, AlphaMatrix)> {
    let parse_err = |line: usize, msg: String| GraphError::Parse { line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input".into()))?;
    let n: usize = header
        .strip_prefix("n=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(1, format!("expected `n=<int>`, got `{header}`")))?;

    let mut triples = Vec::new();
    let mut last: Option<(usize, usize)> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(line_no, format!("expected `from to alpha`, got `{line}`")));
        }
        let from: usize = fields[0].parse().map_err(|_| parse_err(line_no, format!("bad node `{}`", fields[0])))?;
        let to: usize = fields[1].parse().map_err(|_| parse_err(line_no, format!("bad node `{}`", fields[1])))?;
        let alpha: f32 = fields[2].parse().map_err(|_| parse_err(line_no, format!("bad alpha `{}`", fields[2])))?;
        if let Some(prev) = last {
            if (to, from) <= prev {
                return Err(parse_err(line_no, "edges must be unique and sorted by (to, from)".into()));
            }
        }
        last = Some((to, from));
        triples.push((from, to, alpha));
    }
    let pairs: Vec<(usize, usize)> = triples.iter().map(|&(j, i, _)| (j, i)).collect();
    let graph = Graph::new(n, &pairs)?;
    let mut alpha = AlphaMatrix::zeros(n);
    for (from, to, a) in triples {
        alpha.set(from, to, a);
    }
    Ok((graph, alpha))
}
