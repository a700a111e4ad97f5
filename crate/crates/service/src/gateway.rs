//! HTTP and WebSocket surface under `/api/v1`.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};
use tower_http::trace::{DefaultMakeSpan, DefaultOnResponse, TraceLayer};

use crate::clock::{secs_to_micros, ClockMode};
use crate::error::{RigError, ServiceError, SessionError};
use crate::lab::Lab;
use crate::rig::CommandOutcome;
use crate::session::{Authorization, DenyReason};

pub const ADMIN_HEADER: &str = "x-admin-key";
pub const MAX_SUBSCRIBE_HZ: f64 = 5.0;
/// Pending pushes kept per subscriber; older ones are dropped.
pub const PUSH_BACKLOG: usize = 8;
pub const CLOSE_SESSION_EXPIRED: u16 = 4001;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.to_string(), message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn deny(reason: DenyReason) -> Self {
        match reason {
            DenyReason::Missing => Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "session token required"),
            DenyReason::Unknown => Self::new(StatusCode::UNAUTHORIZED, "invalid_token", "session token not recognised"),
            DenyReason::Expired => Self::new(StatusCode::FORBIDDEN, "session_expired", "session has ended"),
        }
    }

    fn body(&self) -> Value {
        json!({ "error": self.code, "message": self.message })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::InvalidInterval => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Overlap(_) | SessionError::AlreadyClaimed | SessionError::RigBusy => StatusCode::CONFLICT,
            SessionError::UnknownCode | SessionError::UnknownSlot(_) => StatusCode::NOT_FOUND,
            SessionError::NotYourTime => StatusCode::FORBIDDEN,
            SessionError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<RigError> for ApiError {
    fn from(e: RigError) -> Self {
        let (status, code) = match e {
            RigError::FractionOutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_fraction"),
            RigError::ScopeDepth { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_depth"),
            RigError::Circuit(_) | RigError::Sensing(_) => (StatusCode::INTERNAL_SERVER_ERROR, "rig_fault"),
        };
        Self::new(status, code, e.to_string())
    }
}

/// Token bucket per bearer token, refilled on wall time.
pub struct RateLimiter {
    rps: f64,
    burst: f64,
    buckets: Mutex<HashMap<String, (f64, Instant)>>,
}

impl RateLimiter {
    pub fn new(rps: f64) -> Self {
        Self { rps, burst: (2.0 * rps).max(1.0), buckets: Mutex::new(HashMap::new()) }
    }

    pub fn check(&self, key: &str) -> bool {
        if self.rps <= 0.0 {
            return true;
        }
        let now = Instant::now();
        let mut map = self.buckets.lock().unwrap_or_else(|p| p.into_inner());
        if map.len() > 10_000 {
            let (rps, burst) = (self.rps, self.burst);
            map.retain(|_, (tokens, at)| *tokens + now.duration_since(*at).as_secs_f64() * rps < burst);
        }
        let (tokens, at) = map.entry(key.to_string()).or_insert((self.burst, now));
        *tokens = (*tokens + now.duration_since(*at).as_secs_f64() * self.rps).min(self.burst);
        *at = now;
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

#[derive(Clone)]
struct Gw {
    lab: Arc<Lab>,
    limiter: Arc<RateLimiter>,
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
        .filter(|t| !t.is_empty())
}

fn eq_ct(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn is_admin(lab: &Lab, headers: &HeaderMap) -> bool {
    match (&lab.config().admin_key, headers.get(ADMIN_HEADER)) {
        (Some(key), Some(given)) => eq_ct(key.as_bytes(), given.as_bytes()),
        _ => false,
    }
}

fn require_admin(lab: &Lab, headers: &HeaderMap) -> Result<(), ApiError> {
    if is_admin(lab, headers) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "admin_required", "valid X-Admin-Key required"))
    }
}

fn require_session(lab: &Lab, token: Option<&str>) -> Result<(), ApiError> {
    match lab.authorize(token) {
        Authorization::Allow { .. } => Ok(()),
        Authorization::Deny(r) => Err(ApiError::deny(r)),
    }
}

fn require_control(lab: &Lab, headers: &HeaderMap) -> Result<(), ApiError> {
    if is_admin(lab, headers) {
        return Ok(());
    }
    require_session(lab, bearer(headers))
}

fn require_read(lab: &Lab, headers: &HeaderMap) -> Result<(), ApiError> {
    if lab.config().session.observer_mode {
        return Ok(());
    }
    require_control(lab, headers)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn rate_limit(State(gw): State<Gw>, req: Request, next: Next) -> Response {
    if let Some(tok) = bearer(req.headers()) {
        if !gw.limiter.check(tok) {
            return ApiError::new(StatusCode::TOO_MANY_REQUESTS, "rate_limited", "too many requests").into_response();
        }
    }
    next.run(req).await
}

async fn measurements(State(gw): State<Gw>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    gw.lab.sync();
    require_read(&gw.lab, &headers)?;
    match gw.lab.latest() {
        Ok((f, stale)) => Ok(Json(json!({
            "vrms": f.vrms,
            "irms": f.irms,
            "power_factor": f.power_factor,
            "capacitor_engaged": f.capacitor_engaged,
            "timestamp": f.timestamp,
            "timestamp_utc": gw.lab.to_utc(f.timestamp),
            "window_cycles": f.window_cycles,
            "stale": stale,
        }))),
        Err(Some(reason)) => {
            let (code, detail) = reason.split_once(':').unwrap_or((reason.as_str(), ""));
            Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, code, detail))
        }
        Err(None) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_measurement", "no window completed yet")),
    }
}

#[derive(Deserialize)]
struct RelayBody {
    engaged: bool,
}

fn command_body(lab: &Lab, out: CommandOutcome) -> Json<Value> {
    let s = out.state;
    Json(json!({
        "capacitor_engaged": s.capacitor_engaged,
        "variac_fraction": s.variac_fraction,
        "load_fraction": s.load_fraction,
        "sim_time": s.sim_time,
        "changed": out.changed,
        "settling": lab.is_settling(),
    }))
}

async fn relay(State(gw): State<Gw>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    gw.lab.sync();
    require_control(&gw.lab, &headers)?;
    let b: RelayBody = parse(&body)?;
    let out = gw.lab.set_capacitor(b.engaged);
    Ok(command_body(&gw.lab, out))
}

#[derive(Deserialize)]
struct VariacBody {
    fraction: f64,
}

async fn variac(State(gw): State<Gw>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    gw.lab.sync();
    if !is_admin(&gw.lab, &headers) {
        if !gw.lab.config().session.students_may_set_variac {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "variac is operator-only"));
        }
        require_session(&gw.lab, bearer(&headers))?;
    }
    let b: VariacBody = parse(&body)?;
    let out = gw.lab.set_variac(b.fraction)?;
    Ok(command_body(&gw.lab, out))
}

#[derive(Deserialize)]
struct ClaimBody {
    claim_code: String,
}

async fn claim(State(gw): State<Gw>, body: Bytes) -> Result<Json<Value>, ApiError> {
    gw.lab.sync();
    let b: ClaimBody = parse(&body)?;
    let tok = gw.lab.claim(&b.claim_code)?;
    Ok(Json(json!({ "token": tok.token, "slot_id": tok.slot_id, "issued_at": tok.issued_at, "expires_at": tok.expires_at })))
}

async fn release(State(gw): State<Gw>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    let tok = bearer(&headers).ok_or_else(|| ApiError::deny(DenyReason::Missing))?;
    Ok(Json(json!({ "released": gw.lab.release(tok) })))
}

async fn rig_config(State(gw): State<Gw>) -> Json<Value> {
    let cfg = gw.lab.config();
    Json(json!({
        "frequency": cfg.rig.frequency,
        "sample_rate": cfg.rig.sample_rate,
        "v_nominal": cfg.rig.source_vrms,
        "adc_bits": cfg.rig.adc_bits,
        "window_cycles": cfg.controller.window_cycles,
        "scope_max_cycles": cfg.controller.scope_max_cycles,
        "clock": cfg.clock.mode,
    }))
}

async fn rig_state(State(gw): State<Gw>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    gw.lab.sync();
    require_read(&gw.lab, &headers)?;
    let s = gw.lab.state();
    Ok(Json(json!({
        "capacitor_engaged": s.capacitor_engaged,
        "variac_fraction": s.variac_fraction,
        "load_fraction": s.load_fraction,
        "sim_time": s.sim_time,
        "settling": gw.lab.is_settling(),
        "session_active": gw.lab.sessions().current_session(gw.lab.now()).is_some(),
    })))
}

async fn health(State(gw): State<Gw>) -> Json<Value> {
    let degraded = gw.lab.is_degraded();
    Json(json!({
        "status": if degraded { "degraded" } else { "ok" },
        "event_log": if degraded { "unavailable" } else { "ok" },
        "clock": gw.lab.clock_mode(),
        "sim_time": gw.lab.sim_time(),
    }))
}

#[derive(Deserialize)]
struct SlotBody {
    student_id: String,
    start: f64,
    end: f64,
}

async fn admin_create_slot(State(gw): State<Gw>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    require_admin(&gw.lab, &headers)?;
    let b: SlotBody = parse(&body)?;
    let slot = gw.lab.sessions().create_slot(&b.student_id, b.start, b.end)?;
    Ok((StatusCode::CREATED, Json(json!(slot))).into_response())
}

async fn admin_list_slots(State(gw): State<Gw>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    require_admin(&gw.lab, &headers)?;
    Ok(Json(json!({ "slots": gw.lab.sessions().list() })))
}

async fn admin_revoke_slot(
    State(gw): State<Gw>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    require_admin(&gw.lab, &headers)?;
    gw.lab.revoke(&id)?;
    Ok(Json(json!({ "revoked": id })))
}

#[derive(Deserialize)]
struct AdvanceBody {
    seconds: f64,
}

async fn admin_advance(State(gw): State<Gw>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    require_admin(&gw.lab, &headers)?;
    let b: AdvanceBody = parse(&body)?;
    if gw.lab.clock_mode() != ClockMode::Simulated {
        return Err(ApiError::new(StatusCode::CONFLICT, "not_simulated", "clock runs on wall time"));
    }
    let windows = gw
        .lab
        .advance(b.seconds)
        .map_err(|e| match e {
            ServiceError::Config(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", m),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        })?
        .len();
    Ok(Json(json!({ "sim_time": gw.lab.sim_time(), "now": gw.lab.now(), "windows": windows })))
}

async fn scope(
    State(gw): State<Gw>,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    gw.lab.sync();
    let token = q.get("token").cloned().or_else(|| bearer(&headers).map(str::to_string));
    let open = gw.lab.config().session.observer_mode || is_admin(&gw.lab, &headers);
    if !open {
        require_session(&gw.lab, token.as_deref())?;
    }
    let session_token = if open { None } else { token };
    Ok(ws.on_upgrade(move |socket| scope_session(gw.lab, socket, session_token)))
}

struct Subscription {
    period_us: i64,
    next_due_us: i64,
    cycles: u32,
}

fn window_message(w: &pfclab_core::WaveformWindow64) -> Message {
    let mut v = json!(w);
    v["type"] = json!("window");
    Message::text(v.to_string())
}

fn error_message(code: &str, message: &str) -> Message {
    Message::text(json!({ "type": "error", "code": code, "message": message }).to_string())
}

fn close(code: u16, reason: &'static str) -> Message {
    Message::Close(Some(CloseFrame { code, reason: reason.into() }))
}

enum Reply {
    Send(Message),
    Close(Message),
    Nothing,
}

fn handle_text(lab: &Lab, text: &str, sub: &mut Option<Subscription>) -> Reply {
    let Ok(v) = serde_json::from_str::<Value>(text) else {
        return Reply::Close(close(1007, "invalid json"));
    };
    if let Some(hz) = v.get("subscribe") {
        let Some(hz) = hz.as_f64() else {
            return Reply::Send(error_message("invalid_rate", "subscribe takes a number"));
        };
        if hz == 0.0 {
            *sub = None;
            return Reply::Send(Message::text(json!({ "type": "unsubscribed" }).to_string()));
        }
        if !(hz > 0.0 && hz <= MAX_SUBSCRIBE_HZ) {
            return Reply::Send(error_message("invalid_rate", &format!("rate must be in (0, {MAX_SUBSCRIBE_HZ}] Hz")));
        }
        let cycles = match v.get("cycles").map(Value::as_u64) {
            None => 2,
            Some(Some(c)) if (1..=lab.config().controller.scope_max_cycles as u64).contains(&c) => c as u32,
            Some(_) => {
                let max = lab.config().controller.scope_max_cycles;
                return Reply::Send(error_message("invalid_depth", &format!("cycles must be in [1, {max}]")));
            }
        };
        let period_us = secs_to_micros(1.0 / hz);
        let now_us = secs_to_micros(lab.sim_time());
        *sub = Some(Subscription { period_us, next_due_us: now_us + period_us, cycles });
        return Reply::Send(Message::text(json!({ "type": "subscribed", "hz": hz, "cycles": cycles }).to_string()));
    }
    if let Some(c) = v.get("cycles") {
        let cycles = c.as_u64().map(|c| c.min(u32::MAX as u64) as u32).unwrap_or(0);
        return match lab.capture_scope(cycles) {
            Ok(w) => Reply::Send(window_message(&w)),
            Err(e) => {
                let api = ApiError::from(e);
                Reply::Send(error_message(&api.code, &api.message))
            }
        };
    }
    Reply::Send(error_message("unknown_request", "expected {\"cycles\": n} or {\"subscribe\": hz}"))
}

fn still_authorized(lab: &Lab, token: &Option<String>) -> bool {
    token.as_deref().is_none_or(|t| lab.authorize(Some(t)).is_allowed())
}

async fn scope_session(lab: Arc<Lab>, mut socket: WebSocket, token: Option<String>) {
    let mut ticks = lab.subscribe_ticks();
    let mut sub: Option<Subscription> = None;
    loop {
        tokio::select! {
            msg = socket.recv() => {
                let Some(Ok(msg)) = msg else { return };
                if !still_authorized(&lab, &token) {
                    let _ = socket.send(close(CLOSE_SESSION_EXPIRED, "session expired")).await;
                    return;
                }
                let reply = match msg {
                    Message::Text(t) => handle_text(&lab, t.as_str(), &mut sub),
                    Message::Binary(_) => Reply::Close(close(1003, "text frames only")),
                    Message::Close(_) => return,
                    Message::Ping(_) | Message::Pong(_) => Reply::Nothing,
                };
                match reply {
                    Reply::Send(m) => {
                        if socket.send(m).await.is_err() {
                            return;
                        }
                    }
                    Reply::Close(m) => {
                        let _ = socket.send(m).await;
                        return;
                    }
                    Reply::Nothing => {}
                }
            }
            changed = ticks.changed() => {
                if changed.is_err() {
                    return;
                }
                let now_us = *ticks.borrow_and_update();
                if !still_authorized(&lab, &token) {
                    let _ = socket.send(close(CLOSE_SESSION_EXPIRED, "session expired")).await;
                    return;
                }
                let Some(s) = sub.as_mut() else { continue };
                let mut due = VecDeque::new();
                while s.next_due_us <= now_us {
                    if due.len() == PUSH_BACKLOG {
                        due.pop_front();
                    }
                    due.push_back(s.next_due_us);
                    s.next_due_us += s.period_us;
                }
                let cycles = s.cycles;
                for _ in due {
                    let m = match lab.capture_scope(cycles) {
                        Ok(w) => window_message(&w),
                        Err(e) => error_message("rig_fault", &e.to_string()),
                    };
                    if socket.send(m).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(lab: Arc<Lab>) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE, header::HeaderName::from_static(ADMIN_HEADER)]);
    let cors = match lab.config().ui_origin.as_deref().and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => cors.allow_origin(origin),
        None => cors.allow_origin(Any),
    };
    let gw = Gw { limiter: Arc::new(RateLimiter::new(lab.config().session.rate_limit_rps)), lab };
    let api = Router::new()
        .route("/measurements", get(measurements))
        .route("/relay", post(relay))
        .route("/variac", post(variac))
        .route("/scope", get(scope))
        .route("/session/claim", post(claim))
        .route("/session", delete(release))
        .route("/rig/config", get(rig_config))
        .route("/rig/state", get(rig_state))
        .route("/health", get(health))
        .route("/admin/slots", post(admin_create_slot).get(admin_list_slots))
        .route("/admin/slots/{id}", delete(admin_revoke_slot))
        .route("/admin/clock/advance", post(admin_advance));
    Router::new()
        .nest("/api/v1", api)
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(gw.clone(), rate_limit))
        .layer(cors)
        .layer(
            TraceLayer::new_for_http()
                .make_span_with(DefaultMakeSpan::new().level(tracing::Level::INFO))
                .on_response(DefaultOnResponse::new().level(tracing::Level::INFO)),
        )
        .with_state(gw)
}
