mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use async_trait::async_trait;
use branchflow::backend::{Backend, Cluster, SimBehavior, SimProgram, TaskStatus, TraceKind};
use branchflow::engine::{
    definition_name, ConflictingCommits, DirectorySource, Outcome, ScheduleOutcome, Stage, StageStatus,
    TemplateKind, Templates,
};
use branchflow::gateway::{EventKind, PipelineEvent, RefKey};
use branchflow::notifier::{Delivery, Notification, NotificationSink};
use common::*;

fn program(image: &str, behavior: SimBehavior) -> SimProgram {
    SimProgram { image: image.into(), behavior }
}

fn failing_build(target: &str) -> SimProgram {
    program(
        "branchflow/build-env:1",
        SimBehavior {
            duration_ticks: 3,
            exit_code: 1,
            log_text: "COMPILATION ERROR in Foo.java".into(),
            match_env: BTreeMap::from([("BUILD_TARGET".into(), target.into())]),
            ..SimBehavior::default()
        },
    )
}

#[tokio::test(flavor = "multi_thread")]
async fn successful_run_records_artifacts_and_keeps_environment() {
    let rig = SimRig::default_rig();
    let ev = push("feature-a", "c1");
    let key = ev.ref_key.clone();
    rig.engine.schedule_event(ev);
    rig.idle().await;

    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.outcome, Outcome::Success);
    assert_eq!(run.artifact_paths, vec!["out/backend.bin", "out/frontend.bin"]);
    let totals = run.report.as_ref().unwrap().totals;
    assert_eq!((totals.run, totals.passed), (5, 5));

    // Definitions are gone, the environment is not.
    for kind in TemplateKind::ALL {
        assert!(rig.sim.task_definition(&definition_name(&key.safe_id, kind)).is_none());
    }
    assert_eq!(rig.running_deploys(&key.safe_id), 1);
    let env = rig.engine.environment(&key).unwrap();
    assert_eq!(Some(env.task.task_id.clone()), run.environment);
    assert!(!rig.storage.path().join(&key.safe_id).exists(), "workspace removed by cleanup");

    // Build and test tasks never outlive the run.
    for t in rig.tasks_for(&key.safe_id) {
        if t.cluster != Cluster::Deploy {
            assert_eq!(t.status, TaskStatus::Stopped, "{t:?}");
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn definitions_mount_the_ref_workspace() {
    // Stepped clock: the run parks in the build stage so the registry can be inspected.
    let rig = SimRig::new(RigOptions { tick: None, ..RigOptions::default() });
    let ev = push("main", "c1");
    let key = ev.ref_key.clone();
    rig.engine.schedule_event(ev);
    let sim = rig.sim.clone();
    let build = definition_name(&key.safe_id, TemplateKind::Build);
    rig.until(false, || sim.task_definition(&build).is_some() && sim.task_definition(&definition_name(&key.safe_id, TemplateKind::Test)).is_some()).await;
    let ws = rig.storage.path().join(&key.safe_id);
    assert!(ws.join("src/tests/get_data.py").is_file());
    for kind in TemplateKind::ALL {
        let def = rig.sim.task_definition(&definition_name(&key.safe_id, kind)).unwrap();
        assert_eq!(def.volume_mounts[0].mount_path, ws.display().to_string());
    }
    rig.drive_until_idle().await;
    assert_eq!(rig.engine.runs()[0].outcome, Outcome::Success);
}

#[tokio::test(flavor = "multi_thread")]
async fn build_failure_skips_deploy_and_test_and_notifies_once() {
    let rig = SimRig::new(RigOptions { programs: vec![failing_build("backend")], ..RigOptions::default() });
    rig.engine.schedule_event(push("feature-a", "c1"));
    rig.idle().await;

    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.outcome, Outcome::Failed);
    assert_eq!(run.status_of(Stage::Build), StageStatus::Failed);
    for s in [Stage::Deploy, Stage::Test, Stage::Report] {
        assert_eq!(run.status_of(s), StageStatus::Skipped);
    }
    assert_eq!(run.status_of(Stage::Cleanup), StageStatus::Success);
    assert!(run.stage(Stage::Build).detail.as_deref().unwrap().contains("COMPILATION ERROR"));

    let notes = rig.engine.notifications();
    assert_eq!(notes.len(), 1);
    let n = &notes[0];
    assert_eq!(n.repository, "acme/poc-app");
    assert_eq!(n.ref_name, "feature-a");
    assert_eq!(n.run_number, 1);
    assert!(n.run_url.ends_with(&format!("/runs/{}", run.run_id)));
    assert!(rig.engine.environments().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn single_target_launches_one_build() {
    let mut opts = RigOptions::default();
    opts.cfg.build_targets = vec!["backend".into()];
    let rig = SimRig::new(opts);
    rig.engine.schedule_event(push("solo", "c1"));
    rig.idle().await;
    let builds = rig.sim.list_tasks(Some(Cluster::Build), &Default::default());
    assert_eq!(builds.len(), 1);
    assert_eq!(rig.engine.runs()[0].artifact_paths, vec!["out/backend.bin"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn zero_test_cases_gives_empty_report() {
    let src = source_with_cases(0);
    let rig = SimRig::new(RigOptions {
        source: Some(Arc::new(DirectorySource::new(src.path()))),
        ..RigOptions::default()
    });
    rig.engine.schedule_event(push("empty", "c1"));
    rig.idle().await;
    let run = &rig.engine.runs()[0];
    assert_eq!(run.outcome, Outcome::Success);
    assert_eq!(run.report.as_ref().unwrap().totals.run, 0);
    assert!(rig.sim.list_tasks(Some(Cluster::Test), &Default::default()).is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn crashed_test_task_yields_synthesized_error_case() {
    let src = source_with_cases(2);
    let crash = program(
        "branchflow/test-env:1",
        SimBehavior {
            duration_ticks: 2,
            exit_code: 139,
            log_text: "Segmentation fault".into(),
            match_env: BTreeMap::from([("CASE_NAME".into(), "case_1".into())]),
            ..SimBehavior::default()
        },
    );
    let rig = SimRig::new(RigOptions {
        source: Some(Arc::new(DirectorySource::new(src.path()))),
        programs: vec![crash],
        ..RigOptions::default()
    });
    rig.engine.schedule_event(push("crashy", "c1"));
    rig.idle().await;
    let run = &rig.engine.runs()[0];
    assert_eq!(run.outcome, Outcome::Success, "test failures do not fail the run");
    let report = run.report.as_ref().unwrap();
    assert_eq!((report.totals.run, report.totals.passed, report.totals.errored), (2, 1, 1));
    assert!(report.cases.iter().any(|c| c.name == "case_1" && c.message.as_deref().unwrap().contains("139")));
}

#[tokio::test(flavor = "multi_thread")]
async fn strict_mode_fails_on_test_failures() {
    let failing = program(
        "branchflow/test-env:1",
        SimBehavior {
            duration_ticks: 2,
            writes: vec![branchflow::backend::SimWrite {
                path: "results/${CASE_NAME}.xml".into(),
                content: r#"<testsuite><testcase name="${CASE_NAME}"><failure message="no"/></testcase></testsuite>"#.into(),
            }],
            ..SimBehavior::default()
        },
    );
    let mut opts = RigOptions { programs: vec![failing], ..RigOptions::default() };
    opts.cfg.strict_tests = true;
    let rig = SimRig::new(opts);
    rig.engine.schedule_event(push("strict", "c1"));
    rig.idle().await;
    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.outcome, Outcome::Failed);
    assert_eq!(run.status_of(Stage::Report), StageStatus::Failed);
    assert_eq!(rig.engine.notifications().len(), 1);
    // Failure path stops the environment this run created.
    assert!(rig.engine.environments().is_empty());
    assert_eq!(rig.running_deploys(&run.ref_key.safe_id), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn template_without_marker_fails_register_stage() {
    let mut opts = RigOptions::default();
    opts.cfg.templates = Templates {
        build: r#"{"name":"b","image":"branchflow/build-env:1","volume_mounts":[{"volume":"w","mount_path":"/fixed"}],"cpu_units":1,"memory_mb":1}"#.into(),
        ..Templates::builtin()
    };
    let rig = SimRig::new(opts);
    rig.engine.schedule_event(push("tpl", "c1"));
    rig.idle().await;
    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.status_of(Stage::RegisterTaskdefs), StageStatus::Failed);
    assert!(run.stage(Stage::RegisterTaskdefs).detail.as_deref().unwrap().contains("marker"));
}

#[tokio::test(flavor = "multi_thread")]
async fn conflicting_pull_request_fails_checkout() {
    let source = ConflictingCommits::new(DirectorySource::new(sample_app()), ["bad-sha".to_owned()]);
    let rig = SimRig::new(RigOptions { source: Some(Arc::new(source)), ..RigOptions::default() });
    rig.engine.schedule_event(PipelineEvent::synthetic(EventKind::PrOpened, "7", Some("bad-sha")));
    rig.idle().await;
    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.status_of(Stage::Checkout), StageStatus::Failed);
    assert_eq!(run.status_of(Stage::Prepare), StageStatus::Skipped);
    assert!(run.ref_key.safe_id.starts_with("pr-7"));
}

#[tokio::test(flavor = "multi_thread")]
async fn second_push_stops_old_environment_before_launching() {
    let rig = SimRig::default_rig();
    let key = RefKey::branch("feature-a");
    rig.engine.schedule_event(push("feature-a", "c1"));
    rig.idle().await;
    let first = rig.engine.environment(&key).unwrap().task.task_id;
    rig.engine.schedule_event(push("feature-a", "c2"));
    rig.idle().await;
    let second = rig.engine.environment(&key).unwrap().task.task_id;
    assert_ne!(first, second);

    let trace = rig.sim.trace();
    let stop = trace.iter().find(|e| e.task_id == first && e.kind == TraceKind::StopRequested).unwrap();
    let launch = trace.iter().find(|e| e.task_id == second && e.kind == TraceKind::Launched).unwrap();
    assert!(stop.seq < launch.seq);
    assert_eq!(rig.running_deploys(&key.safe_id), 1);
    let runs = rig.engine.runs_for(&key);
    assert_eq!(runs.iter().map(|r| r.run_number).collect::<Vec<_>>(), vec![1, 2]);
}

#[tokio::test(flavor = "multi_thread")]
async fn first_deploy_issues_no_stop() {
    let rig = SimRig::default_rig();
    rig.engine.schedule_event(push("fresh", "c1"));
    rig.idle().await;
    let stops = rig
        .sim
        .trace()
        .iter()
        .filter(|e| e.cluster == Cluster::Deploy && e.kind == TraceKind::StopRequested)
        .count();
    assert_eq!(stops, 0);
}

/// Single-slot coalescing queue, written out as the expected outcome list
/// for `n` pushes arriving while run 1 is busy.
fn coalescing_model(n: usize) -> Vec<(bool, u64)> {
    let mut out = Vec::new();
    let mut pending: Option<u64> = None;
    let mut next = 1;
    let mut active = false;
    for _ in 0..n {
        if !active {
            active = true;
            out.push((true, next));
            next += 1;
        } else if let Some(p) = pending {
            out.push((false, p));
        } else {
            pending = Some(next);
            out.push((true, next));
            next += 1;
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn rapid_pushes_coalesce_into_one_pending_run() {
    for n in 1..=6 {
        let rig = SimRig::new(RigOptions { tick: None, ..RigOptions::default() });
        let got: Vec<(bool, u64)> = (0..n)
            .map(|i| match rig.engine.schedule_event(push("feature-a", &format!("c{i}"))) {
                ScheduleOutcome::Scheduled { run_id } => (true, run_id.rsplit('-').next().unwrap().parse().unwrap()),
                ScheduleOutcome::Coalesced { run_id } => (false, run_id.rsplit('-').next().unwrap().parse().unwrap()),
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(got, coalescing_model(n), "n = {n}");
        rig.drive_until_idle().await;
        let runs = rig.engine.runs();
        assert_eq!(runs.len(), n.min(2));
        // The pending run executes the newest trigger.
        let last = runs.last().unwrap();
        assert_eq!(last.trigger.commit_id.as_deref(), Some(format!("c{}", n - 1).as_str()));
        assert!(runs.iter().all(|r| r.outcome == Outcome::Success));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn distinct_refs_run_concurrently() {
    let rig = SimRig::new(RigOptions { tick: None, ..RigOptions::default() });
    rig.engine.schedule_event(push("feature-a", "a1"));
    rig.engine.schedule_event(push("feature-b", "b1"));
    let sim = rig.sim.clone();
    rig.until(false, || sim.list_tasks(Some(Cluster::Build), &Default::default()).len() == 4).await;
    let runs = rig.engine.runs();
    assert!(runs.iter().all(|r| r.status_of(Stage::Build) == StageStatus::Running));
    rig.drive_until_idle().await;
    assert_eq!(rig.engine.environments().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn failure_in_one_ref_leaves_the_other_untouched() {
    let rig = SimRig::new(RigOptions {
        programs: vec![SimProgram {
            image: "branchflow/build-env:1".into(),
            behavior: SimBehavior {
                exit_code: 1,
                duration_ticks: 3,
                match_env: BTreeMap::from([("BRANCH_NAME".into(), "broken".into())]),
                ..SimBehavior::default()
            },
        }],
        ..RigOptions::default()
    });
    rig.engine.schedule_event(push("healthy", "h1"));
    rig.idle().await;
    let healthy = rig.engine.environment(&RefKey::branch("healthy")).unwrap();
    rig.engine.schedule_event(push("broken", "x1"));
    rig.engine.schedule_event(push("healthy", "h2"));
    rig.idle().await;
    let outcomes: BTreeMap<String, Outcome> =
        rig.engine.runs().into_iter().map(|r| (r.run_id.clone(), r.outcome)).collect();
    assert_eq!(outcomes.values().filter(|o| **o == Outcome::Failed).count(), 1);
    assert_eq!(rig.engine.notifications().len(), 1);
    assert_eq!(rig.engine.notifications()[0].ref_name, "broken");
    let now = rig.engine.environment(&RefKey::branch("healthy")).unwrap();
    assert_ne!(now.task.task_id, healthy.task.task_id, "healthy ref redeployed normally");
    assert_eq!(rig.running_deploys(&healthy.ref_key.safe_id), 1);
}

/// Sink that counts the tasks still alive at delivery time.
#[derive(Default)]
struct LiveTaskProbe {
    backend: OnceLock<Arc<branchflow::backend::SimBackend>>,
    seen: Mutex<Vec<usize>>,
}

#[async_trait]
impl NotificationSink for LiveTaskProbe {
    fn name(&self) -> &str {
        "probe"
    }

    async fn deliver(&self, _n: &Notification) -> Delivery {
        let backend = self.backend.get().expect("probe wired");
        let alive = backend.list_tasks(None, &Default::default()).iter().filter(|t| !t.is_stopped()).count();
        self.seen.lock().unwrap().push(alive);
        Delivery::Delivered
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn deploy_failure_stops_tasks_before_notifying() {
    let crash = SimProgram {
        image: "branchflow/deploy-env:1".into(),
        behavior: SimBehavior { duration_ticks: 3, exit_code: 1, serves_endpoint: false, ..SimBehavior::default() },
    };
    let probe = Arc::new(LiveTaskProbe::default());
    let rig = SimRig::new(RigOptions { programs: vec![crash], sinks: vec![probe.clone()], ..RigOptions::default() });
    probe.backend.set(rig.sim.clone()).ok();
    rig.engine.schedule_event(push("doomed", "d1"));
    rig.idle().await;
    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.status_of(Stage::Deploy), StageStatus::Failed);
    assert_eq!(*probe.seen.lock().unwrap(), vec![0], "no live task when the notification went out");
    assert_eq!(rig.engine.notifications().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn cleanup_mid_build_aborts_run_and_stops_builds() {
    let slow = SimProgram {
        image: "branchflow/build-env:1".into(),
        behavior: SimBehavior { duration_ticks: 1000, ..SimBehavior::default() },
    };
    let rig = SimRig::new(RigOptions { programs: vec![slow], tick: None, ..RigOptions::default() });
    rig.engine.schedule_event(PipelineEvent::synthetic(EventKind::PrOpened, "7", Some("p1")));
    let sim = rig.sim.clone();
    rig.until(true, || {
        sim.list_tasks(Some(Cluster::Build), &Default::default()).iter().filter(|t| t.status == TaskStatus::Running).count() == 2
    })
    .await;
    let outcome = rig.engine.schedule_event(PipelineEvent::synthetic(EventKind::PrClosed, "7", None));
    assert_eq!(outcome, ScheduleOutcome::CleanupDispatched);
    rig.drive_until_idle().await;

    let run = &rig.engine.runs()[0];
    run.check_stage_log().unwrap();
    assert_eq!(run.outcome, Outcome::Aborted);
    assert!(rig.sim.list_tasks(Some(Cluster::Build), &Default::default()).iter().all(|t| t.is_stopped()));
    assert!(rig.engine.notifications().is_empty(), "aborted runs do not notify");
    assert_eq!(rig.engine.cleanups().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn cleanup_cancels_pending_run_and_is_idempotent() {
    let rig = SimRig::new(RigOptions { tick: None, ..RigOptions::default() });
    rig.engine.schedule_event(push("feature-a", "c1"));
    rig.engine.schedule_event(push("feature-a", "c2"));
    rig.engine.schedule_event(delete("feature-a"));
    rig.drive_until_idle().await;
    let runs = rig.engine.runs();
    assert_eq!(runs[1].outcome, Outcome::Aborted);
    assert!(runs[1].stages.iter().all(|s| s.status == StageStatus::Skipped));
    runs[1].check_stage_log().unwrap();
    let key = RefKey::branch("feature-a");
    assert!(rig.tasks_for(&key.safe_id).iter().all(|t| t.is_stopped()));
    assert!(!rig.storage.path().join(&key.safe_id).exists());
    assert!(rig.engine.environment(&key).is_none());

    rig.engine.schedule_event(delete("feature-a"));
    rig.drive_until_idle().await;
    let cleanups = rig.engine.cleanups();
    assert_eq!(cleanups.len(), 2);
    assert_eq!(cleanups[1].stopped_count, 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn cleanup_for_unknown_branch_stops_nothing() {
    let rig = SimRig::default_rig();
    let rec = rig.engine.run_cleanup_pipeline(&delete("never-built")).await;
    assert_eq!(rec.stopped_count, 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn capacity_rejection_fails_the_stage() {
    let storage = tempfile::tempdir().unwrap();
    let sim = Arc::new(branchflow::backend::SimBackend::new().with_capacity(1));
    for p in branchflow::app::template_programs() {
        sim.program(p);
    }
    sim.start_clock(std::time::Duration::from_millis(2));
    let engine = branchflow::engine::Engine::new(
        RigOptions::default().cfg,
        sim.clone(),
        branchflow::workspace::WorkspaceStore::new(storage.path()),
        Arc::new(DirectorySource::new(sample_app())),
        Arc::new(branchflow::notifier::Notifier::default()),
    );
    engine.schedule_event(push("cramped", "c1"));
    engine.wait_idle().await;
    let run = &engine.runs()[0];
    assert_eq!(run.status_of(Stage::Build), StageStatus::Failed);
    assert!(run.stage(Stage::Build).detail.as_deref().unwrap().contains("capacity"));
    assert!(sim.list_tasks(None, &Default::default()).iter().all(|t| t.is_stopped()));
}
