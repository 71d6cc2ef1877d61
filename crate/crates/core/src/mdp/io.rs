//! Plain-text MDP files.
//!
//! ```text
//! # comments and blank lines are ignored
//! states 2
//! actions 1
//! gamma 0.9
//! start 1.0 0.0          # optional, defaults to uniform
//! 0 0 1 -1.0 1.0         # s a s' reward prob
//! 1 0 T 5.0 1.0          # T (or the value of `states`) is the terminal state
//! ```

use std::fmt::Write as _;

use super::{FiniteMdp, MdpError, Outcome, Result};

pub fn parse_mdp(text: &str) -> Result<FiniteMdp> {
    let mut n_states = None;
    let mut n_actions = None;
    let mut gamma = None;
    let mut start = None;
    let mut rows: Vec<(usize, usize, usize, usize, f64, f64)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| MdpError::Parse { line: line_no, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        let num = |t: &str| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}")));
        let int = |t: &str| t.parse::<usize>().map_err(|e| err(format!("{t:?}: {e}")));
        match toks[0] {
            "states" | "actions" | "gamma" if toks.len() != 2 => {
                return Err(err(format!("`{}` takes one value", toks[0])))
            }
            "states" => n_states = Some(int(toks[1])?),
            "actions" => n_actions = Some(int(toks[1])?),
            "gamma" => gamma = Some(num(toks[1])?),
            "start" => {
                start = Some(
                    toks[1..]
                        .iter()
                        .map(|t| num(t))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => {
                if toks.len() != 5 {
                    return Err(err("expected `s a s' reward prob`".into()));
                }
                let ns = n_states.ok_or_else(|| err("`states` must come first".into()))?;
                let next = if toks[2] == "T" { ns } else { int(toks[2])? };
                rows.push((
                    line_no,
                    int(toks[0])?,
                    int(toks[1])?,
                    next,
                    num(toks[3])?,
                    num(toks[4])?,
                ));
            }
        }
    }

    let missing = |what: &str| MdpError::Parse {
        line: 0,
        msg: format!("missing `{what}`"),
    };
    let ns = n_states.ok_or_else(|| missing("states"))?;
    let na = n_actions.ok_or_else(|| missing("actions"))?;
    let gamma = gamma.ok_or_else(|| missing("gamma"))?;
    let mut dynamics = vec![Vec::new(); ns * na];
    for (line, s, a, next, reward, prob) in rows {
        if s >= ns || a >= na || next > ns {
            return Err(MdpError::Parse {
                line,
                msg: "index out of range".into(),
            });
        }
        dynamics[s * na + a].push(Outcome { next, reward, prob });
    }
    FiniteMdp::new(ns, na, gamma, dynamics, start)
}

pub fn write_mdp(mdp: &FiniteMdp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "states {}", mdp.n_states());
    let _ = writeln!(out, "actions {}", mdp.n_actions());
    let _ = writeln!(out, "gamma {:?}", mdp.gamma());
    out.push_str("start");
    for p in mdp.start_distribution() {
        let _ = write!(out, " {p:?}");
    }
    out.push('\n');
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            for o in mdp.outcomes(s, a) {
                let _ = writeln!(out, "{s} {a} {} {:?} {:?}", o.next, o.reward, o.prob);
            }
        }
    }
    out
}
