//! Versioned request/response layer over [`Platform`].
//!
//! [`Service::handle`] is a pure function of the request and platform
//! state, so the HTTP server and the in-process transport used by the
//! simulator exercise exactly the same code.
//!
//! Error status mapping:
//!
//! | status | error codes |
//! |--------|-------------|
//! | 400 | MalformedRequest, MalformedPayload |
//! | 401 | AuthFailure |
//! | 404 | NotFound, UnknownStudy, UnknownSubject, UnknownToken, NotRegistered, UnknownRegistration |
//! | 405 | MethodNotAllowed |
//! | 409 | DuplicateStudyId, StudyClosed, AlreadyClosed, DuplicateSubjectLabel, TokenAlreadyUsed, AlreadyLeft |
//! | 422 | InvalidConfig, ChecksumMismatch, SensorNotInStudy, EmptyPayload |
//! | 500 | store and geodesy faults |

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use uuid::Uuid;

use crate::enrollment::{Registration, TokenSecret};
use crate::error::Error;
use crate::ingestion::{BatchCount, BatchReceipt, SensorBatch, BATCH_CONTENT_TYPE};
use crate::notify::{DeviceMessage, PushMessage, Receiver};
use crate::platform::{CloseSummary, Enrolled, IssuedToken, Platform, StudyOverview, TokenRequest};
use crate::qc::QcTable;
use crate::registry::{StudyConfig, StudyDraft};

pub const ADMIN_HEADER: &str = "authorization";
pub const SECRET_HEADER: &str = "x-token-secret";
/// Honoured only when the service runs on a simulated clock.
pub const SIM_NOW_HEADER: &str = "x-sim-now";
pub const JSON: &str = "application/json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
    Patch,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
            Method::Patch => "PATCH",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "PUT" => Method::Put,
            "DELETE" => Method::Delete,
            "PATCH" => Method::Patch,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    /// Path without query string.
    pub path: String,
    pub query: Vec<(String, String)>,
    /// Lower-case header names.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: Method, path: &str) -> Self {
        Request {
            method,
            path: path.to_owned(),
            query: Vec::new(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new(Method::Get, path)
    }

    pub fn post(path: &str) -> Self {
        Self::new(Method::Post, path)
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_ascii_lowercase(), value.into()));
        self
    }

    pub fn query(mut self, name: &str, value: impl Into<String>) -> Self {
        self.query.push((name.to_owned(), value.into()));
        self
    }

    pub fn json<T: Serialize>(mut self, body: &T) -> Self {
        self.body = serde_json::to_vec(body).expect("request body serializes");
        self.header("content-type", JSON)
    }

    pub fn bytes(mut self, content_type: &str, body: Vec<u8>) -> Self {
        self.body = body;
        self.header("content-type", content_type)
    }

    pub fn header_value(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn query_value(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Response {
    fn json<T: Serialize>(status: u16, body: &T) -> Self {
        Response {
            status,
            content_type: JSON.to_owned(),
            body: serde_json::to_vec(body).expect("response serializes"),
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// Structured error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDoc {
    pub error_code: String,
    pub detail: String,
}

/// Failure as seen by a client: either a structured API error or a
/// transport problem (connection refused, undecodable body).
#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{status} {}: {}", .doc.error_code, .doc.detail)]
    Api { status: u16, doc: ErrorDoc },
    #[error("transport: {0}")]
    Transport(String),
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { doc, .. } => Some(&doc.error_code),
            ClientError::Transport(_) => None,
        }
    }
}

pub fn status_for(e: &Error) -> u16 {
    match e {
        Error::MalformedRequest(_) | Error::MalformedPayload(_) => 400,
        Error::AuthFailure => 401,
        Error::UnknownStudy(_)
        | Error::UnknownSubject(_)
        | Error::UnknownToken(_)
        | Error::NotRegistered(_)
        | Error::UnknownRegistration(_) => 404,
        Error::DuplicateStudyId(_)
        | Error::StudyClosed(_)
        | Error::AlreadyClosed(_)
        | Error::DuplicateSubjectLabel(_)
        | Error::TokenAlreadyUsed(_)
        | Error::AlreadyLeft(_) => 409,
        Error::InvalidConfig(_) | Error::ChecksumMismatch | Error::SensorNotInStudy(_) | Error::EmptyPayload => 422,
        Error::Store(_) | Error::Geo(_) => 500,
    }
}

fn error_response(e: &Error) -> Response {
    Response::json(
        status_for(e),
        &ErrorDoc {
            error_code: e.code().to_owned(),
            detail: e.to_string(),
        },
    )
}

fn plain_error(status: u16, code: &str, detail: String) -> Response {
    Response::json(
        status,
        &ErrorDoc {
            error_code: code.to_owned(),
            detail,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auth {
    None,
    Admin,
    Device,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteInfo {
    pub method: Method,
    pub path: &'static str,
    pub auth: Auth,
}

const ROUTES: &[(Method, &str, Auth)] = &[
    (Method::Get, "/v1/routes", Auth::None),
    (Method::Post, "/v1/studies", Auth::Admin),
    (Method::Get, "/v1/studies", Auth::Admin),
    (Method::Get, "/v1/studies/{id}", Auth::Admin),
    (Method::Post, "/v1/studies/{id}/close", Auth::Admin),
    (Method::Post, "/v1/studies/{id}/tokens", Auth::Admin),
    (Method::Get, "/v1/studies/{id}/qc", Auth::Admin),
    (Method::Get, "/v1/studies/{id}/batches", Auth::Admin),
    (Method::Get, "/v1/studies/{id}/overview", Auth::Admin),
    (Method::Post, "/v1/studies/{id}/notify", Auth::Admin),
    (Method::Post, "/v1/enroll", Auth::Device),
    (Method::Post, "/v1/leave", Auth::Device),
    (Method::Post, "/v1/batches", Auth::Device),
    (Method::Get, "/v1/notifications", Auth::Device),
];

/// The endpoint catalog.
pub fn route_table() -> Vec<RouteInfo> {
    ROUTES
        .iter()
        .map(|&(method, path, auth)| RouteInfo { method, path, auth })
        .collect()
}

/// Matches a concrete path against a pattern; returns the `{id}` segment.
fn match_route<'a>(pattern: &str, path: &'a str) -> Option<Option<&'a str>> {
    let p: Vec<&str> = pattern.trim_matches('/').split('/').collect();
    let a: Vec<&str> = path.trim_end_matches('/').trim_start_matches('/').split('/').collect();
    if p.len() != a.len() {
        return None;
    }
    let mut id = None;
    for (ps, s) in p.iter().zip(&a) {
        if *ps == "{id}" {
            if s.is_empty() {
                return None;
            }
            id = Some(*s);
        } else if ps != s {
            return None;
        }
    }
    Some(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Wall clock; the `x-sim-now` header is ignored.
    System,
    /// Time comes from the `x-sim-now` header; requests without one see the
    /// most recent value.
    Simulated,
}

/// Enrollment request: the scanned QR text plus the device's id. A switch
/// names the token the device was using before.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollRequest {
    pub qr_payload: String,
    pub device_id: Uuid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_token_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaveRequest {
    pub study_id: String,
    pub token_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NotifyRequest {
    pub title: String,
    pub body: String,
    pub receiver: Receiver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSheet {
    pub study_id: String,
    pub tokens: Vec<IssuedToken>,
}

pub struct Service {
    platform: Arc<Platform>,
    admin_credential: String,
    clock: ClockMode,
    sim_now: Mutex<DateTime<Utc>>,
}

impl Service {
    pub fn new(platform: Arc<Platform>, admin_credential: impl Into<String>, clock: ClockMode) -> Self {
        Service {
            platform,
            admin_credential: admin_credential.into(),
            clock,
            sim_now: Mutex::new(DateTime::<Utc>::UNIX_EPOCH),
        }
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    fn now(&self, req: &Request) -> Result<DateTime<Utc>, Error> {
        match self.clock {
            ClockMode::System => Ok(Utc::now()),
            ClockMode::Simulated => {
                let mut sim = self.sim_now.lock();
                if let Some(v) = req.header_value(SIM_NOW_HEADER) {
                    *sim = parse_instant(v)?;
                }
                Ok(*sim)
            }
        }
    }

    fn check_admin(&self, req: &Request) -> Result<(), Error> {
        if req.header_value(SECRET_HEADER).is_some() {
            return Err(Error::AuthFailure);
        }
        let presented = req
            .header_value(ADMIN_HEADER)
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(Error::AuthFailure)?;
        let a = presented.as_bytes();
        let b = self.admin_credential.as_bytes();
        let same = a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0;
        if same && !b.is_empty() {
            Ok(())
        } else {
            Err(Error::AuthFailure)
        }
    }

    fn device_secret(req: &Request) -> Result<Option<TokenSecret>, Error> {
        if req.header_value(ADMIN_HEADER).is_some() {
            return Err(Error::AuthFailure);
        }
        match req.header_value(SECRET_HEADER) {
            None => Ok(None),
            Some(v) => TokenSecret::from_hex(v).map(Some).ok_or(Error::AuthFailure),
        }
    }

    pub fn handle(&self, req: &Request) -> Response {
        let mut path_known = false;
        for &(method, pattern, auth) in ROUTES {
            let Some(id) = match_route(pattern, &req.path) else {
                continue;
            };
            path_known = true;
            if method != req.method {
                continue;
            }
            return match self.dispatch(req, method, pattern, auth, id) {
                Ok(resp) => resp,
                Err(e) => error_response(&e),
            };
        }
        if path_known {
            plain_error(405, "MethodNotAllowed", format!("{} not allowed on {}", req.method, req.path))
        } else {
            plain_error(404, "NotFound", format!("no route for {} {}", req.method, req.path))
        }
    }

    fn dispatch(
        &self,
        req: &Request,
        method: Method,
        pattern: &str,
        auth: Auth,
        id: Option<&str>,
    ) -> Result<Response, Error> {
        let secret = match auth {
            Auth::None => None,
            Auth::Admin => {
                self.check_admin(req)?;
                None
            }
            Auth::Device => Self::device_secret(req)?,
        };
        let require_secret = || secret.ok_or(Error::AuthFailure);
        let now = self.now(req)?;
        let p = &self.platform;
        let id = id.unwrap_or_default();
        let ok = |v: &dyn erased::Ser| Ok(v.respond(200));

        match (method, pattern) {
            (Method::Get, "/v1/routes") => ok(&route_table()),
            (Method::Post, "/v1/studies") => {
                let draft: StudyDraft = body(req)?;
                Ok(Response::json(201, &p.create_study(&draft, now)?))
            }
            (Method::Get, "/v1/studies") => ok(&p.list_studies()),
            (Method::Get, "/v1/studies/{id}") => ok(&p.get_config(id)?),
            (Method::Post, "/v1/studies/{id}/close") => ok(&p.close_study(id, now)?),
            (Method::Post, "/v1/studies/{id}/tokens") => {
                let tr: TokenRequest = if req.body.is_empty() { TokenRequest::default() } else { body(req)? };
                let tokens = p.generate_tokens(id, &tr)?;
                Ok(Response::json(
                    201,
                    &TokenSheet {
                        study_id: id.to_owned(),
                        tokens,
                    },
                ))
            }
            (Method::Get, "/v1/studies/{id}/qc") => {
                let at = match req.query_value("now") {
                    Some(v) => parse_instant(v)?,
                    None => now,
                };
                ok(&QcTable::new(id, at, p.study_table(id, at)?))
            }
            (Method::Get, "/v1/studies/{id}/batches") => ok(&p.batch_counts(id)?),
            (Method::Get, "/v1/studies/{id}/overview") => ok(&p.study_overview(id, now)?),
            (Method::Post, "/v1/studies/{id}/notify") => {
                let n: NotifyRequest = body(req)?;
                Ok(Response::json(201, &p.send_notification(id, &n.title, &n.body, n.receiver, now)?))
            }
            (Method::Post, "/v1/enroll") => {
                let er: EnrollRequest =
                    serde_json::from_slice(&req.body).map_err(|e| Error::MalformedPayload(e.to_string()))?;
                let enrolled = match &er.previous_token_id {
                    None => p.activate(&er.qr_payload, er.device_id, now)?,
                    Some(old) => p.switch_device(old, &er.qr_payload, er.device_id, now)?,
                };
                Ok(Response::json(201, &enrolled))
            }
            (Method::Post, "/v1/leave") => {
                let secret = require_secret()?;
                let lr: LeaveRequest = body(req)?;
                ok(&p.leave(&lr.study_id, &lr.token_id, &secret, now)?)
            }
            (Method::Post, "/v1/batches") => {
                let secret = require_secret()?;
                let batch = SensorBatch::decode_frame(&req.body)?;
                ok(&p.submit_batch(&batch, &secret, now)?)
            }
            (Method::Get, "/v1/notifications") => {
                let secret = require_secret()?;
                let study = req
                    .query_value("study_id")
                    .ok_or_else(|| Error::MalformedRequest("study_id query parameter required".into()))?;
                let token = req
                    .query_value("token_id")
                    .ok_or_else(|| Error::MalformedRequest("token_id query parameter required".into()))?;
                ok(&p.poll_notifications(study, token, &secret)?)
            }
            _ => unreachable!("route table and dispatch disagree on {method} {pattern}"),
        }
    }
}

mod erased {
    use super::Response;
    use serde::Serialize;

    /// Object-safe serialization so `dispatch` can share one helper.
    pub trait Ser {
        fn respond(&self, status: u16) -> Response;
    }

    impl<T: Serialize> Ser for T {
        fn respond(&self, status: u16) -> Response {
            Response::json(status, self)
        }
    }
}

fn body<T: DeserializeOwned>(req: &Request) -> Result<T, Error> {
    serde_json::from_slice(&req.body).map_err(|e| Error::MalformedRequest(e.to_string()))
}

fn parse_instant(v: &str) -> Result<DateTime<Utc>, Error> {
    DateTime::parse_from_rfc3339(v)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::MalformedRequest(format!("instant {v:?}: {e}")))
}

/// Moves requests to a service and back. Implemented in-process by
/// [`Service`] and over HTTP by the command-line tools.
pub trait Transport: Send + Sync {
    fn call(&self, req: Request) -> Result<Response, ClientError>;
}

impl Transport for Service {
    fn call(&self, req: Request) -> Result<Response, ClientError> {
        Ok(self.handle(&req))
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn call(&self, req: Request) -> Result<Response, ClientError> {
        (**self).call(req)
    }
}

/// Typed client over any transport.
pub struct ApiClient<T> {
    transport: T,
    admin_credential: Option<String>,
    sim_now: Option<DateTime<Utc>>,
}

impl<T: Transport> ApiClient<T> {
    pub fn new(transport: T) -> Self {
        ApiClient {
            transport,
            admin_credential: None,
            sim_now: None,
        }
    }

    pub fn with_admin(mut self, credential: impl Into<String>) -> Self {
        self.admin_credential = Some(credential.into());
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Stamps subsequent requests with a simulated instant.
    pub fn set_now(&mut self, now: DateTime<Utc>) {
        self.sim_now = Some(now);
    }

    fn stamp(&self, req: Request) -> Request {
        match self.sim_now {
            Some(t) => req.header(SIM_NOW_HEADER, t.to_rfc3339()),
            None => req,
        }
    }

    fn admin(&self, req: Request) -> Request {
        let req = self.stamp(req);
        match &self.admin_credential {
            Some(c) => req.header(ADMIN_HEADER, format!("Bearer {c}")),
            None => req,
        }
    }

    fn device(&self, req: Request, secret: &TokenSecret) -> Request {
        self.stamp(req).header(SECRET_HEADER, secret.to_hex())
    }

    pub fn send<R: DeserializeOwned>(&self, req: Request) -> Result<R, ClientError> {
        let resp = self.transport.call(req)?;
        if resp.is_success() {
            serde_json::from_slice(&resp.body).map_err(|e| ClientError::Transport(format!("response body: {e}")))
        } else {
            let doc = serde_json::from_slice(&resp.body).unwrap_or_else(|_| ErrorDoc {
                error_code: "Unknown".into(),
                detail: String::from_utf8_lossy(&resp.body).into_owned(),
            });
            Err(ClientError::Api {
                status: resp.status,
                doc,
            })
        }
    }

    pub fn create_study(&self, draft: &StudyDraft) -> Result<StudyConfig, ClientError> {
        self.send(self.admin(Request::post("/v1/studies").json(draft)))
    }

    pub fn list_studies(&self) -> Result<Vec<StudyConfig>, ClientError> {
        self.send(self.admin(Request::get("/v1/studies")))
    }

    pub fn get_study(&self, study_id: &str) -> Result<StudyConfig, ClientError> {
        self.send(self.admin(Request::get(&format!("/v1/studies/{study_id}"))))
    }

    pub fn close_study(&self, study_id: &str) -> Result<CloseSummary, ClientError> {
        self.send(self.admin(Request::post(&format!("/v1/studies/{study_id}/close"))))
    }

    pub fn generate_tokens(&self, study_id: &str, req: &TokenRequest) -> Result<TokenSheet, ClientError> {
        self.send(self.admin(Request::post(&format!("/v1/studies/{study_id}/tokens")).json(req)))
    }

    pub fn qc(&self, study_id: &str, at: Option<DateTime<Utc>>) -> Result<QcTable, ClientError> {
        let mut r = Request::get(&format!("/v1/studies/{study_id}/qc"));
        if let Some(t) = at {
            r = r.query("now", t.to_rfc3339());
        }
        self.send(self.admin(r))
    }

    pub fn batch_counts(&self, study_id: &str) -> Result<Vec<BatchCount>, ClientError> {
        self.send(self.admin(Request::get(&format!("/v1/studies/{study_id}/batches"))))
    }

    pub fn overview(&self, study_id: &str) -> Result<StudyOverview, ClientError> {
        self.send(self.admin(Request::get(&format!("/v1/studies/{study_id}/overview"))))
    }

    pub fn notify(&self, study_id: &str, n: &NotifyRequest) -> Result<PushMessage, ClientError> {
        self.send(self.admin(Request::post(&format!("/v1/studies/{study_id}/notify")).json(n)))
    }

    pub fn enroll(&self, req: &EnrollRequest) -> Result<Enrolled, ClientError> {
        self.send(self.stamp(Request::post("/v1/enroll").json(req)))
    }

    pub fn leave(&self, study_id: &str, token_id: &str, secret: &TokenSecret) -> Result<Registration, ClientError> {
        let body = LeaveRequest {
            study_id: study_id.to_owned(),
            token_id: token_id.to_owned(),
        };
        self.send(self.device(Request::post("/v1/leave").json(&body), secret))
    }

    pub fn batch_request(&self, batch: &SensorBatch, secret: &TokenSecret) -> Request {
        self.device(
            Request::post("/v1/batches").bytes(BATCH_CONTENT_TYPE, batch.encode_frame()),
            secret,
        )
    }

    pub fn submit_batch(&self, batch: &SensorBatch, secret: &TokenSecret) -> Result<BatchReceipt, ClientError> {
        self.send(self.batch_request(batch, secret))
    }

    pub fn poll_notifications(
        &self,
        study_id: &str,
        token_id: &str,
        secret: &TokenSecret,
    ) -> Result<Vec<DeviceMessage>, ClientError> {
        let r = Request::get("/v1/notifications")
            .query("study_id", study_id)
            .query("token_id", token_id);
        self.send(self.device(r, secret))
    }
}
