//! Temporary smoke probe for the maneuver pipeline.

use std::time::Instant;
use tubeil::config::Config;
use tubeil::experiments::{evaluate_flip, DomainSpec, FlipController};
use tubeil::imitation::{fine_tune_flip, run_il_flip, FlipPipeline, MethodSpec};
use tubeil::sim::MultirotorParams;

fn main() {
    let mut cfg = Config::default();
    cfg.nmpc.tube.rollouts = 30;
    cfg.il.eval_episodes = 5;
    let params = MultirotorParams::defaults();

    let t0 = Instant::now();
    let pipe = FlipPipeline::build(&params, &cfg).unwrap();
    println!("pipeline build (plan + 30-rollout tube): {:.1} s", t0.elapsed().as_secs_f64());
    println!("tube: {:?}", pipe.tube.halfwidths());

    let spec = MethodSpec::parse("dagger+sa-25").unwrap();
    let s = DomainSpec::source();
    let tflip = DomainSpec::t_flip(&cfg.il, params.hover_thrust());
    let domains = vec![s.clone(), tflip.clone()];

    let t1 = Instant::now();
    let out = run_il_flip(&pipe, &cfg, spec, 1, &domains, 0).unwrap();
    println!("1-demo dagger+sa-25 run: {:.1} s", t1.elapsed().as_secs_f64());
    let demo_rows = out.dataset.provenance.iter().filter(|p| matches!(p, tubeil::policy::Provenance::Demo)).count();
    let aug_rows = out.dataset.len() - demo_rows;
    println!(
        "dataset rows: {} demo + {} augmented ({} steps -> {:.1}/step)",
        demo_rows,
        aug_rows,
        out.demos[0].steps.len(),
        aug_rows as f64 / out.demos[0].steps.len() as f64
    );
    for pt in &out.curve {
        println!(
            "curve demo {} [{}]: success {:.0}% gap {:?}",
            pt.demo_idx, pt.domain, pt.success_rate, pt.expert_gap
        );
    }

    let t2 = Instant::now();
    let (tuned, _, _) = fine_tune_flip(&pipe, &cfg, &out.policy, 1, 0).unwrap();
    println!("fine-tune 1 demo: {:.1} s", t2.elapsed().as_secs_f64());
    for d in [&s, &tflip] {
        let base = evaluate_flip(FlipController::Expert, &pipe, &cfg, d, 5, 999, None).unwrap();
        let m = evaluate_flip(FlipController::Policy(&tuned), &pipe, &cfg, d, 5, 999, Some(&base)).unwrap();
        println!("tuned [{}]: success {:.0}% gap {:?}", d.name, m.success_rate, m.expert_gap);
    }
}
