//! The ablation matrix driver: trains and evaluates every (mode, seed)
//! cell, optionally in parallel worker threads, and emits the component
//! table CSV.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use crate::corpus::Corpus;
use crate::error::{contract_err, Result};
use crate::settings::{Ablation, TrainSettings};
use crate::trainer::train_run;

#[derive(Debug, Clone)]
pub struct AblateCell {
    pub mode: Ablation,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
}

/// Worker-thread cap: MPN_THREADS if set, else the machine's parallelism.
pub fn worker_threads() -> usize {
    if let Ok(raw) = std::env::var("MPN_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs the full (mode x seed) grid. Cells are independent and internally
/// sequential; the grid runs on up to `threads` workers.
pub fn run_grid(
    base: &TrainSettings,
    corpus: &Corpus,
    modes: &[Ablation],
    seeds: &[u64],
    work_dir: &Path,
    threads: usize,
) -> Result<Vec<AblateCell>> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(contract_err!("ablate needs at least one mode and one seed"));
    }
    let cells: Vec<(usize, Ablation, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .enumerate()
        .map(|(i, (m, s))| (i, m, s))
        .collect();
    let results: Mutex<Vec<Option<Result<AblateCell>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next: Mutex<usize> = Mutex::new(0);
    let workers = threads.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= cells.len() {
                        return;
                    }
                    let idx = *guard;
                    *guard += 1;
                    idx
                };
                let (_, mode, seed) = cells[idx];
                let mut settings = base.clone();
                settings.ablation = mode;
                settings.seed = seed;
                let out_dir = work_dir.join(format!("{}_seed{}", mode.as_str(), seed));
                let cell = train_run(&settings, corpus, &out_dir).map(|outcome| AblateCell {
                    mode,
                    seed,
                    rank1: outcome.final_rank1,
                    map: outcome.final_map,
                });
                results.lock().unwrap()[idx] = Some(cell);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every cell ran"))
        .collect()
}

/// Component-table CSV in the ablation study's column layout.
pub fn grid_csv(cells: &[AblateCell]) -> String {
    let mut out = String::from("mode,MTL,C1-S,C2-S,CF,CA,seed,rank1,mAP\n");
    let flag = |b: bool| if b { "1" } else { "0" };
    for cell in cells {
        let (mtl, c1, c2, cf, ca) = cell.mode.components();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            cell.mode.as_str(),
            flag(mtl),
            flag(c1),
            flag(c2),
            flag(cf),
            flag(ca),
            cell.seed,
            cell.rank1,
            cell.map
        );
    }
    out
}

/// Seed-averaged mAP per mode, in first-appearance order.
pub fn mean_map(cells: &[AblateCell]) -> Vec<(Ablation, f64)> {
    let mut order: Vec<Ablation> = Vec::new();
    for cell in cells {
        if !order.contains(&cell.mode) {
            order.push(cell.mode);
        }
    }
    order
        .into_iter()
        .map(|mode| {
            let scores: Vec<f64> = cells
                .iter()
                .filter(|c| c.mode == mode)
                .map(|c| c.map)
                .collect();
            (mode, scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}
