use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::thread::JoinHandle;

use telemon_cli::HttpTransport;
use telemon_core::api::{ClockMode, Method, Request, Service, Transport, ADMIN_HEADER, SECRET_HEADER};
use telemon_core::datastore::Datastore;
use telemon_core::platform::{Platform, PlatformConfig};
use telemon_core::sim::{run_fleet, FleetOptions, Scenario};
use tempfile::TempDir;

const ADMIN: &str = "http-test-admin";
const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/smoke.json");

fn service(root: &Path) -> Arc<Service> {
    let platform = Platform::new(
        Datastore::open(root).unwrap(),
        PlatformConfig {
            server_address: "http://telemon.test".into(),
            auth_hint: None,
            rng_seed: Some(5),
        },
    );
    Arc::new(Service::new(Arc::new(platform), ADMIN, ClockMode::Simulated))
}

struct Server {
    addr: String,
    service: Arc<Service>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    fn start(root: &Path) -> Self {
        let service = service(root);
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let svc = service.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                telemon_cli::serve(listener, svc, async {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        Server {
            addr,
            service,
            stop: Some(stop),
            thread: Some(thread),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn admin_get(path: &str) -> Request {
    Request::get(path).header(ADMIN_HEADER, format!("Bearer {ADMIN}"))
}

#[test]
fn fleet_binary_over_http_matches_in_process_run() {
    let scenario = Scenario::from_json(&fs::read_to_string(SCENARIO).unwrap()).unwrap();

    let local_dir = TempDir::new().unwrap();
    let local = service(local_dir.path());
    let report = run_fleet(&scenario, local.clone(), &FleetOptions::unpaced(ADMIN)).unwrap();
    assert!(report.devices.iter().any(|d| d.crashes > 0));

    let remote_dir = TempDir::new().unwrap();
    let server = Server::start(remote_dir.path());
    let log = remote_dir.path().join("events.ndjson");
    let out = Command::new(env!("CARGO_BIN_EXE_fleet"))
        .args(["run", "--scenario", SCENARIO, "--server", &server.addr, "--admin-token", ADMIN])
        .arg("--log")
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "fleet failed: {}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(fs::read_to_string(&log).unwrap(), report.event_log_text(), "event logs differ");
    fs::remove_file(&log).unwrap();
    assert!(tree(&local_dir.path().join("data")) == tree(&remote_dir.path().join("data")), "datastores differ");

    let http = HttpTransport::new(&server.addr).unwrap();
    for path in ["/v1/studies/Smoke/qc", "/v1/studies/Smoke/batches", "/v1/studies/Smoke/overview", "/v1/studies"] {
        let want = local.handle(&admin_get(path).query("now", "2020-08-04T06:00:00+00:00"));
        let got = http.call(admin_get(path).query("now", "2020-08-04T06:00:00+00:00")).unwrap();
        assert_eq!(got.status, 200, "{path}");
        assert_eq!(got.body, want.body, "{path}");
        assert_eq!(got.content_type, want.content_type, "{path}");
    }
    drop(server);
}

#[test]
fn speedup_paces_the_run() {
    let mut scenario = Scenario::from_json(&fs::read_to_string(SCENARIO).unwrap()).unwrap();
    scenario.duration_days = 0.25;
    scenario.fleet = None;
    scenario.qc_probes.clear();
    scenario.devices.iter_mut().for_each(|d| d.crashes.clear());
    let dir = TempDir::new().unwrap();
    let server = Server::start(dir.path());
    let opts = FleetOptions {
        admin_credential: ADMIN.into(),
        speedup: Some(43_200.0),
        seed: Some(99),
    };
    let report = run_fleet(&scenario, Arc::new(HttpTransport::new(&server.addr).unwrap()), &opts).unwrap();
    // Six simulated hours at 43,200x take half a second of wall time.
    assert!(report.wall_time.as_secs_f64() >= 0.45, "{:?}", report.wall_time);
    assert!(report.effective_speedup() <= 43_200.0 * 1.05);
}

#[test]
fn error_documents_survive_the_wire() {
    let dir = TempDir::new().unwrap();
    let server = Server::start(dir.path());
    let http = HttpTransport::new(&format!("http://{}/", server.addr)).unwrap();
    let code = |req: Request| {
        let resp = http.call(req).unwrap();
        let doc: serde_json::Value = serde_json::from_slice(&resp.body).unwrap();
        (resp.status, doc["error_code"].as_str().unwrap().to_owned())
    };

    assert_eq!(code(Request::get("/v2/nothing")), (404, "NotFound".into()));
    assert_eq!(code(Request::new(Method::Delete, "/v1/studies")), (405, "MethodNotAllowed".into()));
    assert_eq!(code(Request::get("/v1/studies")), (401, "AuthFailure".into()));
    assert_eq!(
        code(admin_get("/v1/studies").header(SECRET_HEADER, "00".repeat(16))),
        (401, "AuthFailure".into()),
        "both credentials at once"
    );
    assert_eq!(
        code(Request::post("/v1/enroll").bytes("application/json", b"{not json".to_vec())),
        (400, "MalformedPayload".into())
    );
    let mut create = Request::post("/v1/studies").header(ADMIN_HEADER, format!("Bearer {ADMIN}"));
    create = create.bytes(
        "application/json",
        br#"{"study_id":"X","name":"X","duration_days":7,"n_subjects":1,"sensors":[],"colour":"red"}"#.to_vec(),
    );
    assert_eq!(code(create), (400, "MalformedRequest".into()), "unknown fields are rejected");

    let client = reqwest::blocking::Client::new();
    let resp = client
        .request(reqwest::Method::OPTIONS, format!("http://{}/v1/studies", server.addr))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 405);

    assert!(server.service.platform().list_studies().is_empty());
}
