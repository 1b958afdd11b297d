use criterion::{criterion_group, criterion_main, Criterion};
use fdlc_bench::{contact_problem, short_experiment};
use fdlc_core::experiment::optimize_run;
use fdlc_core::lower::LowerSolver;
use fdlc_core::{ContactKind, SolverSettings};

fn lower(c: &mut Criterion) {
    for kind in [ContactKind::Point, ContactKind::Fdlc] {
        let problem = contact_problem(kind, 1);
        let mut solver = LowerSolver::new(SolverSettings::default());
        let sol = solver.solve_step(&problem, None).unwrap();
        c.bench_function(&format!("solve_step/{kind}/cold"), |b| {
            b.iter(|| solver.solve_step(&problem, None).unwrap())
        });
        c.bench_function(&format!("solve_step/{kind}/warm"), |b| {
            b.iter(|| solver.solve_step(&problem, Some(&sol)).unwrap())
        });
        c.bench_function(&format!("linearize_step/{kind}"), |b| {
            b.iter(|| solver.linearize_step(&problem, &sol).unwrap())
        });
    }
}

fn upper(c: &mut Criterion) {
    let cfg = short_experiment(8);
    let mut group = c.benchmark_group("optimize");
    group.sample_size(10);
    for model in &cfg.models {
        group.bench_function(format!("{}/T8", model.kind), |b| {
            b.iter(|| optimize_run(&cfg, model, 10.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, lower, upper);
criterion_main!(benches);
