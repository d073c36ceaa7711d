use saccade_core::epoching::{
    annotate, detect_saccade_onsets, extract_epochs, label_trials, EpochConfig, Geometry, LabelledEvent,
};
use saccade_core::model::{LabelRole, SaccadeRole, Task, TrialLabel};
use saccade_core::synthgen::{generate_session, GenConfig};

fn cfg(task: Task) -> GenConfig {
    GenConfig { fs_neural: 250.0, task, n_trials_per_direction: 15, ..GenConfig::default() }
}

#[test]
fn planted_onsets_recovered_within_one_gaze_sample() {
    for task in [Task::FreeViewing, Task::VisuallyGuided] {
        let c = cfg(task);
        let (s, gt) = generate_session(&c).unwrap();
        let mut events = detect_saccade_onsets(&s.gaze, &Geometry::default());
        annotate(&mut events, &s);
        let tol = 1.0 / c.fs_gaze + 1e-9;
        let hits = gt
            .saccades
            .iter()
            .filter(|p| events.iter().any(|e| (e.onset_s - p.onset).abs() <= tol && e.role == p.role))
            .count();
        assert!(hits as f64 >= 0.95 * gt.saccades.len() as f64, "{hits}/{}", gt.saccades.len());
        assert_eq!(events.len(), gt.saccades.len());
        for (e, p) in events.iter().zip(&gt.saccades) {
            assert_eq!(e.direction, p.direction);
            assert_eq!(e.run_index, Some(p.run_index));
        }
        if task == Task::VisuallyGuided {
            let waits: Vec<f64> = events.iter().filter_map(|e| e.wait_time_s).collect();
            assert_eq!(waits.len(), gt.wait_times.len());
            for (w, t) in waits.iter().zip(&gt.wait_times) {
                assert!((w - t).abs() <= tol);
            }
        }
        let labels = label_trials(&events, task, LabelRole::Combined);
        assert_eq!(labels.len(), 120);
        assert!(labels.iter().all(|l| l.label.valid));
    }
}

#[test]
fn blink_trials_are_excluded() {
    let c = GenConfig { blink_prob: 0.3, ..cfg(Task::FreeViewing) };
    let (s, gt) = generate_session(&c).unwrap();
    let mut events = detect_saccade_onsets(&s.gaze, &Geometry::default());
    annotate(&mut events, &s);
    let labels = label_trials(&events, Task::FreeViewing, LabelRole::Initial);
    let blinked = gt.initial_onsets().filter(|p| p.blinked).count();
    assert!(blinked > 0);
    assert_eq!(labels.iter().filter(|l| !l.label.valid).count(), blinked);
}

#[test]
fn epoch_average_peaks_fifty_ms_after_onset() {
    let c = GenConfig { fs_neural: 2000.0, direction_depth: 0.0, ..cfg(Task::FreeViewing).noiseless() };
    let (s, gt) = generate_session(&c).unwrap();
    let events: Vec<LabelledEvent> = gt
        .saccades
        .iter()
        .filter(|p| p.role == SaccadeRole::Initial)
        .map(|p| LabelledEvent { time: p.onset, label: TrialLabel::saccade(p.direction, LabelRole::Initial, p.run_index) })
        .collect();
    let set = extract_epochs(&s.neural, &events, &EpochConfig::default(), &s.runs);
    assert_eq!(set.dropped, 0);
    let n = set.epochs[0].n_samples();
    let mut avg = vec![0.0; n];
    for e in &set.epochs {
        for (a, v) in avg.iter_mut().zip(e.data.column(0)) {
            *a += v / set.epochs.len() as f64;
        }
    }
    let peak = (0..n).max_by(|&a, &b| avg[a].abs().total_cmp(&avg[b].abs())).unwrap();
    let t = peak as f64 / c.fs_neural - 0.5;
    assert!((t - 0.05).abs() <= 1.0 / c.fs_neural + 1e-9, "peak at {t}");
}
