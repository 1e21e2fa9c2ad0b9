mod common;

use chrono::Duration;
use common::{draft, dashboard, utc, Harness, ADMIN};
use serde_json::Value;
use std::sync::Arc;
use uuid::Uuid;

use telemon_core::api::{
    ApiClient, EnrollRequest, ErrorDoc, NotifyRequest, Request, Service, ADMIN_HEADER, SECRET_HEADER, SIM_NOW_HEADER,
};
use telemon_core::enrollment::parse_qr_payload;
use telemon_core::ingestion::{ReceiptOutcome, SensorBatch};
use telemon_core::notify::Receiver;
use telemon_core::platform::TokenRequest;
use telemon_core::qc::Flag;
use telemon_core::sensor::SensorKind;

fn client(h: &Harness) -> ApiClient<Arc<Service>> {
    ApiClient::new(h.service.clone()).with_admin(ADMIN)
}

fn error_doc(body: &[u8]) -> ErrorDoc {
    serde_json::from_slice(body).unwrap()
}

#[test]
fn dashboard_table_over_the_wire() {
    let h = Harness::new();
    dashboard::load(h.platform());
    let c = client(&h);
    let table = c.qc(dashboard::STUDY, Some(dashboard::now())).unwrap();
    assert_eq!(table.rows.len(), 6);
    for (row, want) in table.rows.iter().zip(&dashboard::ROWS) {
        assert_eq!(row.token_id, want.token_id);
        assert_eq!(row.date_registered, dashboard::ts(want.registered));
        assert_eq!(row.date_left, want.left.map(dashboard::ts));
        assert_eq!(row.time_in_study_days, want.time_in_study, "{}", want.token_id);
        assert_eq!(row.status_code, want.status_code, "{}", want.token_id);
        for &(sensor, n, _) in want.batches {
            let cell = row.sensors.iter().find(|s| s.sensor == sensor).unwrap();
            assert_eq!(cell.n_batches, n, "{} {sensor}", want.token_id);
        }
    }
    let flags = |i: usize| &table.rows[i].flags;
    assert!(flags(0).contains(&Flag::NoData48h));
    assert!(flags(1).contains(&Flag::LeftTooEarly));
    assert!(flags(3).contains(&Flag::MultipleActive) && flags(4).contains(&Flag::MultipleActive));
    assert!(flags(5).contains(&Flag::LeftTooEarly));
    assert_eq!(table.rows[1].sensors.iter().find(|s| s.sensor == SensorKind::Activity).unwrap().last_received, Some(dashboard::ts("2020-08-10 23:06:25")));

    // The palette ships in the same document.
    let raw: Value = serde_json::from_slice(
        &h.service
            .handle(&Request::get("/v1/studies/Test/qc").query("now", "2020-08-11T13:00:00Z").header(ADMIN_HEADER, format!("Bearer {ADMIN}")))
            .body,
    )
    .unwrap();
    let legend = raw["legend"].as_array().unwrap();
    assert_eq!(legend.len(), 6);
    assert!(legend.iter().any(|e| e["flag"] == "NO_DATA_48H" && e["color"] == "red"));
    assert_eq!(raw["status_codes"].as_array().unwrap().len(), 3);
}

#[test]
fn enroll_upload_and_monitor() {
    let h = Harness::new();
    let mut c = client(&h);
    let t0 = utc(2021, 3, 1, 9, 0, 0);
    c.set_now(t0);
    let cfg = c.create_study(&draft("S1", &["location", "activity"])).unwrap();
    assert_eq!(cfg.codes_per_subject, 4);
    assert_eq!(c.list_studies().unwrap().len(), 1);

    let sheet = c
        .generate_tokens("S1", &TokenRequest { count: Some(2), ..Default::default() })
        .unwrap();
    assert_eq!(sheet.tokens.len(), 8);
    assert_eq!(sheet.tokens[0].token_id, "Test_010321_00001_1");

    let qr = &sheet.tokens[0].qr_payload;
    let token = parse_qr_payload(qr).unwrap();
    let device = Uuid::from_u128(7);
    let enrolled = c
        .enroll(&EnrollRequest { qr_payload: qr.clone(), device_id: device, previous_token_id: None })
        .unwrap();
    assert_eq!(enrolled.config, cfg);

    let batch = SensorBatch::new("S1", &token.token_id, device, SensorKind::Location, Uuid::from_u128(1), t0, b"[1,2,3]".to_vec());
    let first = c.submit_batch(&batch, &token.secret).unwrap();
    let again = c.submit_batch(&batch, &token.secret).unwrap();
    assert_eq!(first.outcome, ReceiptOutcome::Stored);
    assert_eq!(again.outcome, ReceiptOutcome::Duplicate);
    assert_eq!(first.object_ref, again.object_ref);

    let counts = c.batch_counts("S1").unwrap();
    assert_eq!(counts.len(), 2, "zero-filled per chosen sensor");
    let overview = c.overview("S1").unwrap();
    assert_eq!((overview.total_subjects, overview.enrolled_subjects, overview.active_registrations), (2, 1, 1));

    c.set_now(t0 + Duration::days(3));
    let table = c.qc("S1", None).unwrap();
    assert!(table.rows[0].flags.contains(&Flag::NoData48h));

    // Leaving ends uploads once the grace period is over.
    c.leave("S1", &token.token_id, &token.secret).unwrap();
    c.set_now(t0 + Duration::days(5));
    let late = SensorBatch::new("S1", &token.token_id, device, SensorKind::Location, Uuid::from_u128(2), t0, b"[4]".to_vec());
    let err = c.submit_batch(&late, &token.secret).unwrap_err();
    assert_eq!(err.code(), Some("UnknownRegistration"));
}

#[test]
fn notifications_are_delivered_once() {
    let h = Harness::new();
    let mut c = client(&h);
    c.set_now(utc(2021, 3, 1, 9, 0, 0));
    c.create_study(&draft("N", &["location"])).unwrap();
    let sheet = c.generate_tokens("N", &TokenRequest { count: Some(1), ..Default::default() }).unwrap();
    let qr = sheet.tokens[0].qr_payload.clone();
    let tok = parse_qr_payload(&qr).unwrap();
    c.enroll(&EnrollRequest { qr_payload: qr, device_id: Uuid::from_u128(3), previous_token_id: None }).unwrap();

    let msg = c
        .notify("N", &NotifyRequest { title: "Hello".into(), body: "Please charge".into(), receiver: Receiver::All })
        .unwrap();
    assert_eq!(msg.queued_for.len(), 1);
    let got = c.poll_notifications("N", &tok.token_id, &tok.secret).unwrap();
    assert_eq!(got.len(), 1);
    assert!(c.poll_notifications("N", &tok.token_id, &tok.secret).unwrap().is_empty());

    let unknown = c.notify(
        "N",
        &NotifyRequest {
            title: "x".into(),
            body: "y".into(),
            receiver: Receiver::Subjects(["nobody".to_string()].into()),
        },
    );
    assert_eq!(unknown.unwrap_err().code(), Some("UnknownSubject"));
}

#[test]
fn error_documents_and_status_codes() {
    let h = Harness::new();
    let s = &h.service;
    let admin = |r: Request| r.header(ADMIN_HEADER, format!("Bearer {ADMIN}")).header(SIM_NOW_HEADER, "2021-03-01T09:00:00Z");
    let check = |r: Request, status: u16, code: &str| {
        let resp = s.handle(&r);
        assert_eq!(resp.status, status, "{} {}", r.method, r.path);
        assert_eq!(error_doc(&resp.body).error_code, code);
    };

    assert_eq!(s.handle(&admin(Request::post("/v1/studies").json(&draft("E", &["location"])))).status, 201);
    check(admin(Request::post("/v1/studies").json(&draft("E", &["location"]))), 409, "DuplicateStudyId");
    check(admin(Request::post("/v1/studies").json(&draft("F", &["barometer"]))), 422, "InvalidConfig");
    check(admin(Request::post("/v1/studies").bytes("application/json", b"{".to_vec())), 400, "MalformedRequest");
    check(Request::get("/v1/studies"), 401, "AuthFailure");
    check(Request::get("/v1/studies").header(ADMIN_HEADER, "Bearer wrong"), 401, "AuthFailure");
    check(admin(Request::get("/v1/studies")).header(SECRET_HEADER, "00"), 401, "AuthFailure");
    check(admin(Request::get("/v1/studies/nope")), 404, "UnknownStudy");
    check(Request::get("/v1/nothing"), 404, "NotFound");
    check(Request::get("/v1/batches"), 405, "MethodNotAllowed");

    let sheet: Value = serde_json::from_slice(&s.handle(&admin(Request::post("/v1/studies/E/tokens").json(&TokenRequest { count: Some(1), ..Default::default() }))).body).unwrap();
    let qr = sheet["tokens"][0]["qr_payload"].as_str().unwrap().to_owned();
    let tok = parse_qr_payload(&qr).unwrap();
    let device = Uuid::from_u128(9);
    let enroll = |qr: &str| Request::post("/v1/enroll").json(&EnrollRequest { qr_payload: qr.into(), device_id: device, previous_token_id: None });
    check(enroll("not a qr code"), 400, "MalformedPayload");
    assert_eq!(s.handle(&enroll(&qr)).status, 201);
    check(enroll(&qr), 409, "TokenAlreadyUsed");

    let good = SensorBatch::new("E", &tok.token_id, device, SensorKind::Location, Uuid::from_u128(1), utc(2021, 3, 1, 9, 0, 0), b"abc".to_vec());
    let upload = |b: &SensorBatch| Request::post("/v1/batches").bytes("application/x-telemon-batch", b.encode_frame()).header(SECRET_HEADER, tok.secret.to_hex());
    let mut corrupt = good.clone();
    corrupt.payload[0] ^= 1;
    check(upload(&corrupt), 422, "ChecksumMismatch");
    let mut wrong_sensor = good.clone();
    wrong_sensor.header.sensor = SensorKind::Activity;
    check(upload(&wrong_sensor), 422, "SensorNotInStudy");
    check(upload(&SensorBatch::new("E", &tok.token_id, device, SensorKind::Location, Uuid::from_u128(2), utc(2021, 3, 1, 9, 0, 0), Vec::new())), 422, "EmptyPayload");
    check(upload(&good).header(ADMIN_HEADER, format!("Bearer {ADMIN}")), 401, "AuthFailure");
    check(Request::post("/v1/batches").bytes("application/x-telemon-batch", good.encode_frame()), 401, "AuthFailure");
    check(Request::post("/v1/batches").bytes("text/plain", b"no header line".to_vec()).header(SECRET_HEADER, tok.secret.to_hex()), 400, "MalformedRequest");
    assert_eq!(s.handle(&upload(&good)).status, 200);
    assert!(h.platform().datastore().fsck("E").unwrap().is_clean());

    assert_eq!(s.handle(&admin(Request::post("/v1/studies/E/close"))).status, 200);
    check(admin(Request::post("/v1/studies/E/close")), 409, "AlreadyClosed");
    let mut after_close = good.clone();
    after_close.header.batch_id = Uuid::from_u128(3);
    check(upload(&after_close), 409, "StudyClosed");
}

#[test]
fn route_table_is_public() {
    let h = Harness::new();
    let resp = h.service.handle(&Request::get("/v1/routes"));
    assert_eq!(resp.status, 200);
    let routes: Value = serde_json::from_slice(&resp.body).unwrap();
    let paths: Vec<&str> = routes.as_array().unwrap().iter().map(|r| r["path"].as_str().unwrap()).collect();
    assert!(paths.contains(&"/v1/studies/{id}/qc"));
    assert!(paths.contains(&"/v1/batches"));
}
