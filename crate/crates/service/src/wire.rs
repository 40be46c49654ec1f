//! Request and response bodies.

use convrec::graph::NodeId;
use convrec::policy::Event;
use convrec::session::{Prompt, SessionStatus, TranscriptLine};
use convrec::simulator::Response;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateRequest {
    /// Known user id. Missing, unknown or non-user ids start a cold session.
    pub user: Option<NodeId>,
    /// Attribute the user opens the conversation with.
    pub seed_attribute: Option<NodeId>,
}

/// What a feedback call answers: an attribute id for questions, or for
/// recommendations either one listed item or the whole list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    One(NodeId),
    List(Vec<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub response: Response,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTurn {
    pub turn: usize,
    pub prompt: Prompt,
    pub response: Response,
    pub event: Event,
    pub reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSession {
    pub token: String,
    /// `None` for cold-start sessions.
    pub user: Option<NodeId>,
    pub cold_start: bool,
    pub status: SessionStatus,
    /// Turns played so far.
    pub turn: usize,
    pub max_turns: usize,
    /// Awaiting feedback; `None` once the session is terminal.
    pub prompt: Option<Prompt>,
    pub history: Vec<WireTurn>,
    /// Accepted item, when the user named one.
    pub success_item: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl WireSession {
    /// Rebuild the client view from transcript lines.
    pub fn from_transcript(token: &str, lines: &[TranscriptLine], prompt: Option<Prompt>, diagnostic: Option<String>) -> Self {
        let mut out = WireSession {
            token: token.to_string(),
            user: None,
            cold_start: false,
            status: SessionStatus::Active,
            turn: 0,
            max_turns: 0,
            prompt: None,
            history: Vec::new(),
            success_item: None,
            diagnostic,
        };
        for l in lines {
            match l {
                TranscriptLine::Start { user, max_turns, cold_start, .. } => {
                    out.user = (!cold_start).then_some(*user);
                    out.cold_start = *cold_start;
                    out.max_turns = *max_turns;
                }
                TranscriptLine::Turn(r) => {
                    if r.event == Event::RecSuc {
                        out.success_item = r.chosen.or(match &r.prompt {
                            Prompt::Recommend { items } if items.len() == 1 => Some(items[0]),
                            _ => None,
                        });
                    }
                    out.history.push(WireTurn {
                        turn: r.turn,
                        prompt: r.prompt.clone(),
                        response: r.response,
                        event: r.event,
                        reward: r.reward,
                        chosen: r.chosen,
                    });
                }
                TranscriptLine::End { status, .. } => out.status = *status,
            }
        }
        out.turn = out.history.len();
        if !out.status.is_terminal() {
            out.prompt = prompt;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub variant: Option<String>,
    pub max_turns: usize,
    pub active_sessions: usize,
    /// Sessions that ended in success or at the turn limit.
    pub completed_sessions: usize,
    pub aborted_sessions: usize,
    pub successes: usize,
    /// SR at the turn limit over completed sessions.
    pub success_rate: Option<f64>,
    pub average_turns: Option<f64>,
    /// Per turn, the share of sessions still running that were shown items.
    pub rec_ratio: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}
