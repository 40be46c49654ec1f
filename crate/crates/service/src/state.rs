use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use convrec::config::RunConfig;
use convrec::eval::{self, Variant};
use convrec::graph::{NodeId, NodeKind};
use convrec::pipeline::{self, Paths};
use convrec::policy::QNet;
use convrec::session::{self, Components, Prompt, Session, SessionError, SessionOutcome, SessionStatus, TranscriptLine};
use convrec::simulator::Response;

use crate::store::TranscriptStore;
use crate::wire::{CreateRequest, FeedbackRequest, MetricsSnapshot, Target, WireSession};
use crate::ServiceError;

/// Checkpoints shared read-only by every session.
pub struct Model {
    pub components: Components,
    pub q: Option<QNet>,
    pub variant: Variant,
}

impl Model {
    pub fn load(cfg: &RunConfig) -> Result<Self, pipeline::PipelineError> {
        let variant = Variant::parse(&cfg.service.variant).map_err(|e| convrec::config::ConfigError::Invalid(e.to_string()))?;
        let prep = pipeline::prepare(cfg)?;
        let components = pipeline::components(cfg, &prep, variant)?;
        let q = pipeline::load_policy(cfg, variant)?;
        Ok(Self { components, q, variant })
    }

    fn is_known_user(&self, u: NodeId) -> bool {
        self.components.graph.kind(u).is_ok_and(|k| k == NodeKind::User) && self.components.fm.embedding(u).is_ok()
    }
}

struct Live {
    session: Session,
    last_seen: Instant,
}

#[derive(Default)]
struct Registry {
    live: HashMap<String, Arc<Mutex<Live>>>,
    /// Terminal sessions, plus unfinished ones that could not be resumed.
    parked: HashMap<String, WireSession>,
    completed: Vec<SessionOutcome>,
    aborted: usize,
    created: u64,
}

pub struct Service {
    model: Option<Arc<Model>>,
    unavailable: String,
    store: TranscriptStore,
    timeout: Duration,
    seed: u64,
    max_turns: usize,
    registry: Mutex<Registry>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub fn transcript_dir(cfg: &RunConfig) -> PathBuf {
    if cfg.service.transcripts.is_empty() {
        Paths::new(cfg).transcripts()
    } else {
        PathBuf::from(&cfg.service.transcripts)
    }
}

impl Service {
    /// Load checkpoints if they exist and restore stored sessions. A
    /// missing checkpoint leaves the service up but unable to start
    /// sessions.
    pub fn open(cfg: &RunConfig) -> Result<Self, ServiceError> {
        let (model, unavailable) = match Model::load(cfg) {
            Ok(m) => (Some(m), String::new()),
            Err(e) => {
                log::warn!("models unavailable: {e}");
                (None, e.to_string())
            }
        };
        let store = TranscriptStore::open(transcript_dir(cfg))?;
        Self::with_model(model, unavailable, store, cfg)
    }

    pub fn with_model(model: Option<Model>, unavailable: String, store: TranscriptStore, cfg: &RunConfig) -> Result<Self, ServiceError> {
        let svc = Self {
            max_turns: model.as_ref().map_or(cfg.session.max_turns, |m| m.components.config.max_turns),
            model: model.map(Arc::new),
            unavailable,
            store,
            timeout: Duration::from_secs(cfg.service.timeout_secs),
            seed: cfg.stage_seed(13),
            registry: Mutex::new(Registry::default()),
        };
        svc.restore()?;
        Ok(svc)
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn model(&self) -> Result<&Arc<Model>, ServiceError> {
        self.model.as_ref().ok_or_else(|| ServiceError::ModelUnavailable(self.unavailable.clone()))
    }

    fn restore(&self) -> Result<(), ServiceError> {
        let stored = self.store.load_all()?;
        let mut reg = lock(&self.registry);
        reg.created = stored.len() as u64;
        for (token, lines) in stored {
            let ended = lines.iter().any(|l| matches!(l, TranscriptLine::End { .. }));
            if ended {
                let view = WireSession::from_transcript(&token, &lines, None, None);
                record_end(&mut reg, view.status, &lines)?;
                reg.parked.insert(token, view);
                continue;
            }
            let Some(model) = &self.model else {
                reg.parked.insert(token.clone(), WireSession::from_transcript(&token, &lines, None, Some("waiting for models".into())));
                continue;
            };
            let mut session = match replay(model, &token, &lines) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("session {token} could not be restored: {e}");
                    let end = TranscriptLine::End { status: SessionStatus::Aborted, turns: count_turns(&lines) };
                    self.store.append(&token, std::slice::from_ref(&end))?;
                    let mut all = lines.clone();
                    all.push(end);
                    reg.aborted += 1;
                    reg.parked.insert(token.clone(), WireSession::from_transcript(&token, &all, None, Some(format!("restore failed: {e}"))));
                    continue;
                }
            };
            let _ = session.prompt(&model.components, model.q.as_ref(), 0.0);
            if session.status().is_terminal() {
                let lines = session.transcript();
                self.store.append(&token, &lines[lines.len() - 1..])?;
                let view = view_of(&session);
                record_end(&mut reg, session.status(), &lines)?;
                reg.parked.insert(token, view);
            } else {
                reg.live.insert(token, Arc::new(Mutex::new(Live { session, last_seen: Instant::now() })));
            }
        }
        Ok(())
    }

    pub fn create(&self, req: CreateRequest) -> Result<WireSession, ServiceError> {
        let model = self.model()?;
        let c = &model.components;
        let token = uuid::Uuid::new_v4().simple().to_string();
        let seed = {
            let mut reg = lock(&self.registry);
            reg.created += 1;
            session::session_seed(self.seed, reg.created)
        };
        let started = match req.user.filter(|&u| model.is_known_user(u)) {
            Some(u) => Session::start(c, token.clone(), u, req.seed_attribute, seed),
            None => Session::start_cold(c, token.clone(), req.seed_attribute, seed),
        };
        let mut session = started.map_err(|e| match e {
            SessionError::Graph(g) => ServiceError::InvalidBody(format!("seed_attribute: {g}")),
            other => ServiceError::Session(other),
        })?;
        match session.prompt(c, model.q.as_ref(), 0.0) {
            Ok(_) | Err(SessionError::Finished) => {}
            Err(e) => return Err(e.into()),
        }
        self.store.append(&token, &session.transcript())?;
        let view = view_of(&session);
        let mut reg = lock(&self.registry);
        if session.status().is_terminal() {
            record_end(&mut reg, session.status(), &session.transcript())?;
            reg.parked.insert(token, view.clone());
        } else {
            reg.live.insert(token, Arc::new(Mutex::new(Live { session, last_seen: Instant::now() })));
        }
        Ok(view)
    }

    pub fn get(&self, token: &str) -> Result<WireSession, ServiceError> {
        let live = {
            let reg = lock(&self.registry);
            if let Some(v) = reg.parked.get(token) {
                return Ok(v.clone());
            }
            reg.live.get(token).cloned()
        };
        let live = live.ok_or_else(|| ServiceError::NotFound(token.to_string()))?;
        let guard = lock(&live);
        Ok(view_of(&guard.session))
    }

    pub fn feedback(&self, token: &str, req: FeedbackRequest) -> Result<WireSession, ServiceError> {
        let live = {
            let reg = lock(&self.registry);
            match (reg.live.get(token), reg.parked.get(token)) {
                (Some(l), _) => l.clone(),
                (None, Some(v)) if v.status.is_terminal() => return Err(ServiceError::Finished(token.to_string())),
                (None, Some(_)) => return Err(ServiceError::ModelUnavailable(self.unavailable.clone())),
                (None, None) => return Err(ServiceError::NotFound(token.to_string())),
            }
        };
        let model = self.model()?;
        let c = &model.components;
        let mut guard = lock(&live);
        let s = &mut guard.session;
        if s.status().is_terminal() {
            return Err(ServiceError::Finished(token.to_string()));
        }
        let pending = s.pending_prompt().cloned().ok_or_else(|| ServiceError::Finished(token.to_string()))?;
        let chosen = check_target(&pending, &req.target)?;
        let before = s.turns().len();
        match (req.response, chosen) {
            (Response::Accept, Some(item)) => s.accept_item(c, item)?,
            (r, _) => s.respond(c, r)?,
        };
        if !s.status().is_terminal() {
            match s.prompt(c, model.q.as_ref(), 0.0) {
                Ok(_) | Err(SessionError::Finished) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let lines = s.transcript();
        // Start line, then `before` turns already stored.
        self.store.append(token, &lines[1 + before..])?;
        guard.last_seen = Instant::now();
        let view = view_of(&guard.session);
        if guard.session.status().is_terminal() {
            let status = guard.session.status();
            drop(guard);
            let mut reg = lock(&self.registry);
            reg.live.remove(token);
            record_end(&mut reg, status, &lines)?;
            reg.parked.insert(token.to_string(), view.clone());
        }
        Ok(view)
    }

    /// Abort sessions idle for longer than the timeout. Returns how many.
    pub fn sweep(&self, now: Instant) -> Result<usize, ServiceError> {
        let idle: Vec<(String, Arc<Mutex<Live>>)> = {
            let reg = lock(&self.registry);
            reg.live.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let mut n = 0;
        for (token, live) in idle {
            let mut guard = lock(&live);
            if guard.session.status().is_terminal() || now.saturating_duration_since(guard.last_seen) < self.timeout {
                continue;
            }
            guard.session.abort("inactivity timeout");
            let lines = guard.session.transcript();
            self.store.append(&token, &lines[lines.len() - 1..])?;
            let view = view_of(&guard.session);
            drop(guard);
            let mut reg = lock(&self.registry);
            reg.live.remove(&token);
            record_end(&mut reg, SessionStatus::Aborted, &lines)?;
            reg.parked.insert(token, view);
            n += 1;
        }
        Ok(n)
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let reg = lock(&self.registry);
        let t = self.max_turns;
        let done = &reg.completed;
        MetricsSnapshot {
            variant: self.model.as_ref().map(|m| m.variant.to_string()),
            max_turns: t,
            active_sessions: reg.live.len(),
            completed_sessions: done.len(),
            aborted_sessions: reg.aborted,
            successes: done.iter().filter(|o| o.status == SessionStatus::Success).count(),
            success_rate: eval::success_rate_at(done, t).ok(),
            average_turns: eval::average_turns(done).ok(),
            rec_ratio: eval::rec_ratio_curve(done, t).unwrap_or_default(),
        }
    }
}

fn count_turns(lines: &[TranscriptLine]) -> usize {
    lines.iter().filter(|l| matches!(l, TranscriptLine::Turn(_))).count()
}

fn view_of(s: &Session) -> WireSession {
    WireSession::from_transcript(&s.id, &s.transcript(), s.pending_prompt().cloned(), s.diagnostic().map(str::to_string))
}

fn record_end(reg: &mut Registry, status: SessionStatus, lines: &[TranscriptLine]) -> Result<(), ServiceError> {
    match status {
        SessionStatus::Success | SessionStatus::MaxTurnFail => {
            reg.completed.push(SessionOutcome::from_transcript(lines)?);
        }
        SessionStatus::Aborted => reg.aborted += 1,
        SessionStatus::Active => {}
    }
    Ok(())
}

/// The item named by an accept, if any; a mismatch is a conflict.
fn check_target(pending: &Prompt, target: &Target) -> Result<Option<NodeId>, ServiceError> {
    let conflict = || ServiceError::TargetMismatch { expected: serde_json::to_value(pending).unwrap_or_default() };
    match (pending, target) {
        (Prompt::Ask { attribute }, Target::One(p)) if p == attribute => Ok(None),
        (Prompt::Recommend { items }, Target::One(i)) if items.contains(i) => Ok(Some(*i)),
        (Prompt::Recommend { items }, Target::List(l)) if l == items => Ok(None),
        _ => Err(conflict()),
    }
}

/// Re-run an unfinished session from its transcript. Prompts are checked
/// against the recorded ones so a changed model cannot silently diverge.
fn replay(model: &Model, token: &str, lines: &[TranscriptLine]) -> Result<Session, ServiceError> {
    let c = &model.components;
    let Some(TranscriptLine::Start { user, seed_attribute, seed, cold_start, .. }) = lines.first() else {
        return Err(ServiceError::Store(format!("{token}: missing start record")));
    };
    let mut s = if *cold_start {
        Session::start_cold(c, token, *seed_attribute, *seed)?
    } else {
        Session::start(c, token, *user, *seed_attribute, *seed)?
    };
    for l in &lines[1..] {
        let TranscriptLine::Turn(r) = l else { continue };
        let p = s.prompt(c, model.q.as_ref(), 0.0)?;
        if p != r.prompt {
            return Err(ServiceError::Store(format!("{token}: turn {} replays as {p:?}, stored {:?}", r.turn, r.prompt)));
        }
        match r.chosen {
            Some(item) => s.accept_item(c, item)?,
            None => s.respond(c, r.response)?,
        };
    }
    Ok(s)
}
