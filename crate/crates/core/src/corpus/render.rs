use super::{Premise, ProofState, StateCase};
use crate::{Error, Result};

pub const VAR_MARK: &str = "<VAR>";
pub const GOAL_MARK: &str = "<GOAL>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPremise {
    pub args_text: String,
    pub goal_text: String,
    pub full_text: String,
}

fn render_args<'a>(args: impl IntoIterator<Item = &'a String>) -> String {
    args.into_iter()
        .map(|a| format!("{VAR_MARK} {a}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn join_nonempty(args_text: &str, goal_text: &str) -> String {
    if args_text.is_empty() {
        goal_text.to_string()
    } else {
        format!("{args_text} {goal_text}")
    }
}

pub fn render_premise(p: &Premise) -> RenderedPremise {
    let args_text = render_args(&p.args);
    let goal_text = format!("{GOAL_MARK} {}", p.goal);
    let full_text = join_nonempty(&args_text, &goal_text);
    RenderedPremise {
        args_text,
        goal_text,
        full_text,
    }
}

pub fn render_case(case: &StateCase) -> String {
    join_nonempty(&render_args(&case.hypotheses), &format!("{GOAL_MARK} {}", case.goal))
}

/// Renders every case and joins them with a single space.
pub fn render_state(s: &ProofState) -> String {
    s.cases.iter().map(render_case).collect::<Vec<_>>().join(" ")
}

/// Inverse of [`render_state`] on normalized text.
///
/// Text without any marker is read as a single goal with no hypotheses.
pub fn parse_rendered_state(text: &str) -> Result<ProofState> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::InvalidArgument("empty state".into()));
    }
    if !words.iter().any(|w| *w == VAR_MARK || *w == GOAL_MARK) {
        return Ok(ProofState::single(Vec::new(), words.join(" ")));
    }

    enum Slot {
        Var,
        Goal,
    }
    let mut cases = Vec::new();
    let mut hyps: Vec<String> = Vec::new();
    let mut current: Option<(Slot, Vec<&str>)> = None;

    let malformed = |m: &str| Error::InvalidArgument(format!("malformed state: {m}"));
    let flush = |slot: Option<(Slot, Vec<&str>)>, hyps: &mut Vec<String>, cases: &mut Vec<StateCase>| -> Result<()> {
        match slot {
            None => Ok(()),
            Some((_, body)) if body.is_empty() => Err(malformed("empty segment")),
            Some((Slot::Var, body)) => {
                hyps.push(body.join(" "));
                Ok(())
            }
            Some((Slot::Goal, body)) => {
                cases.push(StateCase::new(std::mem::take(hyps), body.join(" ")));
                Ok(())
            }
        }
    };

    for w in words {
        match w {
            VAR_MARK => {
                flush(current.take(), &mut hyps, &mut cases)?;
                current = Some((Slot::Var, Vec::new()));
            }
            GOAL_MARK => {
                flush(current.take(), &mut hyps, &mut cases)?;
                current = Some((Slot::Goal, Vec::new()));
            }
            _ => match current.as_mut() {
                Some((_, body)) => body.push(w),
                None => return Err(malformed("text before the first marker")),
            },
        }
    }
    flush(current.take(), &mut hyps, &mut cases)?;
    if !hyps.is_empty() {
        return Err(malformed("hypotheses without a goal"));
    }
    Ok(ProofState { cases })
}
