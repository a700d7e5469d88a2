use nnn_core::config::RunConfig;
use nnn_core::train::Phase;

fn load(name: &str) -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    cfg.validate().unwrap();
    cfg
}

#[test]
fn default_matches_published_table() {
    let c = load("default.cfg");
    assert_eq!(c.train.lr, 1e-4);
    assert_eq!(c.train.warmup_steps, 100);
    assert_eq!(c.train.steps, 5000);
    assert_eq!(c.train.grad_noise, 1e-5);
    assert_eq!(c.train.clip_norm, 1.0);
    assert_eq!(c.train.initial_lr, 1e-7);
    assert_eq!(c.train.decay_steps, 14000);
    assert_eq!(c.model.l1, 10.0);
    assert_eq!(c.model.head_layers, 5);
    assert_eq!(c.model.head_width, 64);
    assert_eq!(c.model.n_layers, 2);
    assert_eq!(c.model.d_ff, 512);
    assert_eq!(c.model.balancing, 0.5);
    assert_eq!(c.total_steps(), 10_000);
}

#[test]
fn desk_overrides_default() {
    let c = load("desk.cfg");
    assert_eq!(c.model.d_ff, 128);
    assert_eq!(c.model.l1, 1.0);
    assert_eq!(c.phases, vec![Phase { steps: 1200, balancing: 0.5 }]);
    assert_eq!(c.sweep.lambdas.len(), 5);
    assert_eq!(c.train.decay_steps, 14000);
    let again = RunConfig::parse_str(&c.to_text()).unwrap();
    assert_eq!(again.to_text(), c.to_text());
}
