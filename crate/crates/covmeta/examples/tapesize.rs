// temp probe: per-op node counts and bytes for one task's recorded graph
use std::collections::BTreeMap;

use covmeta::config::{Algorithm, RunConfig};
use covmeta::dataset::generate_tasks;
use covmeta::meta::outer_objective_grad;
use covmeta::rng::derive;
use covmeta::taskgen::{purpose, Dependence, MetaDistribution, Variant};

fn main() {
    let cfg = RunConfig::new(Algorithm::Ours, Variant::Sine, Dependence::Dependent)
        .normalize()
        .unwrap();
    let md = MetaDistribution::build(Variant::Sine, Dependence::Dependent, 2);
    let tasks = generate_tasks(&md, derive(2, purpose::TRAIN_TASKS), 25, 5, 10);
    let params = cfg.init_meta_params();
    let outer = cfg.to_outer_config();
    let (bd, grad) = outer_objective_grad(&params, &outer, &tasks, 0, 1, true).unwrap();
    println!("total {:.3} grad_len {}", bd.total, grad.unwrap().numel());
    let stats = covmeta::tape::debug_stats::snapshot();
    let mut rows: Vec<_> = stats.iter().collect();
    rows.sort_by_key(|(_, (_, bytes))| std::cmp::Reverse(*bytes));
    let all: usize = stats.values().map(|&(_, b)| b).sum();
    println!("-- op: nodes, MB (total {} MB)", all >> 20);
    let _ = rows.iter().take(14).for_each(|(name, &(n, bytes))| {
        println!("{name:>10}: {n:>8} nodes {:>7.1} MB", bytes as f64 / 1e6);
    });
    let _ = BTreeMap::<u8, u8>::new();
}
