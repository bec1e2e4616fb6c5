use evomoe_core::trainer::{train, Config};

fn main() {
    let mut cfg = Config::default();
    cfg.model.t_shared = 20;
    cfg.model.t_dense = 120;
    cfg.model.t_total = 200;
    cfg.model.schedule.decay_iters = 100;
    cfg.finalize().unwrap();
    let run = train(&cfg).unwrap();
    for m in &run.metrics {
        println!("iter={:3} phase={:?} task={:.4} bal={:.4} tau={:.3} mean_sel={:.2}",
            m.iter, m.phase, m.task_loss, m.balance_loss, m.temperature, m.mean_selected_experts);
    }
}
