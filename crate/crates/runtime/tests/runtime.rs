use proptest::prelude::*;
use skyvi_core::catalog::OutputRow;
use skyvi_core::config::Config;
use skyvi_core::io::{image_path, write_image, write_tasks};
use skyvi_core::model::{ImagePatch, ModelConfig, Priors, PARAM_DIM};
use skyvi_core::partition::{estimate_work, make_tasks, partition_sky, shift_partition, SkyRegion, Task};
use skyvi_core::synth::{degrade_catalog, generate_catalog, render_images, survey_metas};
use skyvi_runtime::driver::{run_inprocess, RunOptions};
use skyvi_runtime::hub::RunOutcome;
use skyvi_runtime::images::MemImages;
use skyvi_runtime::metrics::account;
use skyvi_runtime::net::{run_tcp, run_worker};
use skyvi_runtime::wire::{read_message, Message};
use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

struct Survey {
    tasks: Vec<Task>,
    patches: Vec<ImagePatch>,
}

/// Two-stage task list over a small synthetic field.
fn survey() -> Survey {
    let bounds = SkyRegion::new([0.0, 0.0], [30.0, 30.0]).unwrap();
    let model = ModelConfig::default();
    let truth = generate_catalog(&bounds, 24, &Priors::default(), 17).unwrap().catalog;
    let metas = survey_metas(&bounds, 15, 40.0, 1.2);
    let patches = render_images(&truth, &metas, &model, 18).unwrap();
    let prior = degrade_catalog(&truth, 0.3, 0.2, 0.0, 19).unwrap();
    let total = estimate_work(&bounds, &prior, &metas, &model);
    let leaves = partition_sky(&bounds, &prior, &metas, &model, total / 4.0, 2.0).unwrap();
    let s1: Vec<SkyRegion> = leaves.iter().map(|l| l.region).collect();
    let s2 = shift_partition(&s1, &bounds).unwrap();
    let mut tasks = make_tasks(&s1, &prior, &metas, &model, 1, 0).unwrap().tasks;
    let next = tasks.len() as u64;
    tasks.extend(make_tasks(&s2, &prior, &metas, &model, 2, next).unwrap().tasks);
    Survey { tasks, patches }
}

fn run(s: &Survey, processes: usize) -> RunOutcome {
    let opts = RunOptions {
        processes,
        threads: 1,
        seed: 5,
    };
    let images = Arc::new(MemImages::new(s.patches.clone()));
    run_inprocess(s.tasks.clone(), images, &Config::default(), &opts).unwrap()
}

fn bits(rows: &[OutputRow]) -> Vec<String> {
    rows.iter().map(|r| format!("{r:?}")).collect()
}

#[test]
fn inprocess_runs_agree_across_process_counts() {
    let s = survey();
    assert!(s.tasks.iter().any(|t| t.stage == 2));
    let base = run(&s, 1);
    assert!(base.failures.is_empty(), "{:?}", base.failures);
    let n_sources = s.tasks.iter().filter(|t| t.stage == 1).map(|t| t.source_ids.len()).sum::<usize>();
    assert_eq!(base.rows.len(), n_sources);
    for p in [2, 3] {
        let out = run(&s, p);
        assert_eq!(bits(&out.rows), bits(&base.rows), "{p} processes");
        assert_eq!(out.stage_params, base.stage_params);

        // each task exactly once
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for t in &out.trace.tasks {
            *seen.entry(t.task).or_default() += 1;
        }
        assert_eq!(seen.len(), s.tasks.len());
        assert!(seen.values().all(|&c| c == 1));

        // stage barrier
        let s1_end = out.trace.tasks.iter().filter(|t| t.stage == 1).map(|t| t.end).fold(0.0, f64::max);
        let s2_start = out.trace.tasks.iter().filter(|t| t.stage == 2).map(|t| t.start).fold(f64::INFINITY, f64::min);
        assert!(s2_start >= s1_end);

        let m = account(&out.trace, &Config::default().runtime);
        assert_eq!(m.processes.len(), p);
        for pm in &m.processes {
            assert!(pm.task_processing >= 0.0 && pm.image_loading >= 0.0 && pm.load_imbalance >= 0.0);
            assert!(pm.other >= -1e-6, "{pm:?}");
            assert!((pm.component_sum() - pm.wall_seconds).abs() < 1e-9);
        }
        assert!(m.active_pixel_visits > 0);
    }
}

#[test]
fn tcp_run_matches_inprocess() {
    let s = survey();
    let dir = tempfile::tempdir().unwrap();
    let image_dir = dir.path().join("images");
    std::fs::create_dir(&image_dir).unwrap();
    for (i, p) in s.patches.iter().enumerate() {
        write_image(&image_path(&image_dir, i), p).unwrap();
    }
    let task_file = dir.path().join("tasks.txt");
    write_tasks(&task_file, &s.tasks).unwrap();

    let opts = RunOptions {
        processes: 2,
        threads: 1,
        seed: 5,
    };
    let mut workers = Vec::new();
    let out = run_tcp(
        s.tasks.clone(),
        &task_file,
        &image_dir,
        &Config::default(),
        &opts,
        Duration::from_secs(30),
        &mut |addr, p| {
            workers.push(std::thread::spawn(move || run_worker(addr, p as u32)));
            Ok(())
        },
    )
    .unwrap();
    for w in workers {
        w.join().unwrap().unwrap();
    }
    let local = run(&s, 2);
    assert_eq!(bits(&out.rows), bits(&local.rows));
    assert_eq!(out.trace.tasks.len(), s.tasks.len());
}

#[test]
fn truncated_and_unknown_frames_are_errors() {
    let m = Message::Put {
        source: 3,
        block: [1.5; PARAM_DIM],
    };
    let frame = m.encode();
    assert!(read_message(&mut &frame[..frame.len() - 1]).is_err());
    assert!(read_message(&mut &frame[..2]).is_err());
    assert!(read_message(&mut &[][..]).unwrap().is_none());
    let mut bad = frame.clone();
    bad[4] = 0x7f;
    assert!(read_message(&mut &bad[..]).is_err());
    assert!(Message::decode(&[0x03, 1, 2]).is_err());
}

fn arb_message() -> impl Strategy<Value = Message> {
    let block = prop::array::uniform32(any::<f64>()).prop_map(|a| {
        let mut b = [0.0; PARAM_DIM];
        b.copy_from_slice(&a[..PARAM_DIM]);
        b
    });
    prop_oneof![
        any::<u32>().prop_map(|process| Message::Hello { process }),
        any::<bool>().prop_map(|blocking| Message::Claim { blocking }),
        any::<u64>().prop_map(|source| Message::Get { source }),
        (any::<u64>(), block.clone()).prop_map(|(source, block)| Message::Put { source, block }),
        (any::<u64>(), prop::collection::vec(any::<u64>(), 0..20)).prop_map(|(task, neighbors)| Message::Task { task, neighbors }),
        Just(Message::NotNow),
        Just(Message::Done),
        Just(Message::Ack),
        block.prop_map(|block| Message::Block { block }),
        any::<u64>().prop_map(|stamp| Message::Stamp { stamp }),
        ".{0,40}".prop_map(|message| Message::Error { message }),
        ".{0,40}".prop_map(|reason| Message::Abort { reason }),
        (any::<u64>(), any::<u32>(), ".{0,30}", ".{0,10}", ".{0,10}").prop_map(
            |(seed, threads, config, task_file, image_dir)| Message::Welcome {
                seed,
                threads,
                config,
                task_file,
                image_dir
            }
        ),
    ]
}

proptest! {
    #[test]
    fn frames_roundtrip(m in arb_message()) {
        let frame = m.encode();
        let back = read_message(&mut &frame[..]).unwrap().unwrap();
        // bitwise, so NaN blocks compare equal
        prop_assert_eq!(back.encode(), frame);
    }
}
