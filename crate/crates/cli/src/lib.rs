//! HTTP adapters around [`telemon_core::api::Service`].
//!
//! The server side turns an axum request into an API [`Request`] and hands
//! it to `Service::handle`; the client side does the reverse with reqwest.
//! Neither side carries any business logic.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::Router;
use telemon_core::api::{ClientError, Method, Request, Response, Service, Transport, JSON};

/// Large enough for a full IMU batch frame with headroom.
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .fallback(adapt)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<Service>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn adapt(
    State(service): State<Arc<Service>>,
    method: axum::http::Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> HttpResponse {
    let Ok(method) = method.as_str().parse::<Method>() else {
        return error(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", format!("{method} is not supported"));
    };
    let mut req = Request::new(method, uri.path());
    if let Some(q) = uri.query() {
        req.query = url::form_urlencoded::parse(q.as_bytes()).into_owned().collect();
    }
    for (name, value) in &headers {
        match value.to_str() {
            Ok(v) => req = req.header(name.as_str(), v),
            Err(_) => {
                return error(StatusCode::BAD_REQUEST, "MalformedRequest", format!("header {name} is not text"))
            }
        }
    }
    req.body = body.to_vec();
    // Handling may block on the store's commit queue.
    match tokio::task::spawn_blocking(move || service.handle(&req)).await {
        Ok(resp) => into_http(resp),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", e.to_string()),
    }
}

fn into_http(resp: Response) -> HttpResponse {
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, resp.content_type)], Body::from(resp.body)).into_response()
}

fn error(status: StatusCode, code: &str, detail: String) -> HttpResponse {
    let body = serde_json::json!({ "error_code": code, "detail": detail });
    (status, [(header::CONTENT_TYPE, JSON)], body.to_string()).into_response()
}

/// Blocking HTTP client transport. Must not be used from inside an async
/// runtime.
pub struct HttpTransport {
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    /// `server` is `host:port` or a full `http://` base URL.
    pub fn new(server: &str) -> Result<Self, ClientError> {
        let base = if server.contains("://") {
            server.trim_end_matches('/').to_owned()
        } else {
            format!("http://{}", server.trim_end_matches('/'))
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(HttpTransport { base, client })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }
}

impl Transport for HttpTransport {
    fn call(&self, req: Request) -> Result<Response, ClientError> {
        let method = reqwest::Method::from_bytes(req.method.to_string().as_bytes())
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let mut builder = self
            .client
            .request(method, format!("{}{}", self.base, req.path))
            .query(&req.query);
        for (k, v) in &req.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let resp = builder
            .body(req.body)
            .send()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_owned();
        let body = resp.bytes().map_err(|e| ClientError::Transport(e.to_string()))?.to_vec();
        Ok(Response {
            status,
            content_type,
            body,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_url_forms() {
        assert_eq!(HttpTransport::new("127.0.0.1:8080").unwrap().base_url(), "http://127.0.0.1:8080");
        assert_eq!(HttpTransport::new("http://h:1/").unwrap().base_url(), "http://h:1");
    }

    #[test]
    fn refused_connection_is_a_transport_error() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let t = HttpTransport::new(&format!("127.0.0.1:{port}")).unwrap();
        assert!(matches!(t.call(Request::get("/v1/routes")), Err(ClientError::Transport(_))));
    }
}
