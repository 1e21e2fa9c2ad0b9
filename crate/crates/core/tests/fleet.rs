mod common;

use common::{draft, utc, Harness, ADMIN};
use std::collections::BTreeSet;
use std::sync::Arc;
use telemon_core::api::Transport;
use telemon_core::qc::Flag;
use telemon_core::registry::SensorRequest;
use telemon_core::sensor::SensorKind;
use telemon_core::sim::scenario::{CrashMode, CrashSpec, DeviceSpec, Interval};
use telemon_core::sim::{run_fleet, FleetOptions, Scenario};

fn scenario(devices: Vec<DeviceSpec>, days: f64, sensors: &[&str]) -> Scenario {
    Scenario {
        seed: 5,
        start: utc(2020, 8, 1, 6, 0, 0),
        duration_days: days,
        study: draft("Sim", sensors),
        sync_interval_s: 900,
        restart_delay_s: 0,
        qc_probes: Vec::new(),
        devices,
        fleet: None,
    }
}

const PPD: [&str; 3] = ["activity", "application_usage", "location"];

#[test]
fn happy_path_stores_every_batch_once() {
    let h = Harness::new();
    let sc = scenario(vec![DeviceSpec::named("a")], 1.0, &PPD);
    let report = run_fleet(&sc, h.service.clone(), &FleetOptions::unpaced(ADMIN)).unwrap();
    let dev = &report.devices[0];
    // 24 h from 06:00: 144 location, 288 activity, 1 app-usage snapshot.
    let count = |k| dev.generated.iter().filter(|g| g.sensor == k).count();
    assert_eq!(count(SensorKind::Location), 144);
    assert_eq!(count(SensorKind::Activity), 288);
    assert_eq!(count(SensorKind::ApplicationUsage), 1);
    assert_eq!(dev.remaining_buffered, 0);

    let store = h.platform().datastore();
    let stored = store.object_ids("Sim").unwrap();
    let generated: BTreeSet<_> = dev.generated.iter().map(|g| g.object.clone()).collect();
    assert_eq!(stored, generated);
    assert_eq!(h.platform().stored_batches(), dev.generated.len());
    assert!(store.fsck("Sim").unwrap().is_clean());
}

#[test]
fn same_seed_same_log() {
    let sc = scenario(
        vec![DeviceSpec {
            random_crashes: 4,
            ..DeviceSpec::named("a")
        }],
        2.0,
        &PPD,
    );
    let a = run_fleet(&sc, Harness::new().service, &FleetOptions::unpaced(ADMIN)).unwrap();
    let b = run_fleet(&sc, Harness::new().service, &FleetOptions::unpaced(ADMIN)).unwrap();
    assert_eq!(a.event_log, b.event_log);
    assert!(a.event_log.iter().any(|l| l.contains("\"crashed\"")));
}

#[test]
fn mid_upload_crash_resends_as_duplicate() {
    let h = Harness::new();
    let mut d = DeviceSpec::named("a");
    d.crashes = vec![CrashSpec {
        at: utc(2020, 8, 1, 12, 0, 0),
        mode: CrashMode::MidUpload,
    }];
    let report = run_fleet(&scenario(vec![d], 1.0, &PPD), h.service.clone(), &FleetOptions::unpaced(ADMIN)).unwrap();
    let log = report.event_log_text();
    assert!(log.contains("\"mode\":\"mid_upload\""));
    assert!(log.contains("\"outcome\":\"DUPLICATE\""));
    let dev = &report.devices[0];
    assert_eq!(h.platform().stored_batches(), dev.generated.len());
}

#[test]
fn silenced_device_gets_no_data_flag() {
    let h = Harness::new();
    let mut quiet = DeviceSpec::named("quiet");
    quiet.wifi_off = vec![Interval {
        from: utc(2020, 8, 2, 0, 0, 0),
        to: utc(2020, 8, 7, 0, 0, 0),
    }];
    let sc = scenario(vec![DeviceSpec::named("ok"), quiet], 5.0, &PPD);
    let report = run_fleet(&sc, h.service.clone(), &FleetOptions::unpaced(ADMIN)).unwrap();
    let rows = &report.final_qc.rows;
    let by_token = |t: &str| rows.iter().find(|r| r.token_id == t).unwrap();
    let ok = by_token(report.devices[0].token_id.as_deref().unwrap());
    let quiet = by_token(report.devices[1].token_id.as_deref().unwrap());
    assert!(!ok.flags.contains(&Flag::NoData48h));
    assert_eq!(ok.status_code, None);
    assert!(quiet.flags.contains(&Flag::NoData48h));
}

#[test]
fn config_decides_which_generators_run() {
    let h = Harness::new();
    let mut sc = scenario(vec![DeviceSpec::named("a")], 0.25, &["accelerometer", "location"]);
    sc.study.sensors[0] = SensorRequest {
        name: "accelerometer".into(),
        frequency: Some(20.0),
    };
    let report = run_fleet(&sc, h.service.clone(), &FleetOptions::unpaced(ADMIN)).unwrap();
    let dev = &report.devices[0];
    assert!(dev.generated.iter().all(|g| matches!(g.sensor, SensorKind::Accelerometer | SensorKind::Location)));
    assert!(dev.generated.iter().any(|g| g.sensor == SensorKind::Accelerometer));
    assert!(dev.imu_windows_paused > 0, "still windows pause IMU recording");
    let _: &dyn Transport = &*h.service;
    let _ = Arc::strong_count(&h.service);
}
