use std::time::Instant;

use sparsekit_core::bench::{run_sweep, Phase, QuantSetting, SweepSpec};
use sparsekit_core::model::{Model, ModelConfig};
use sparsekit_core::runtime::Clock;
use sparsekit_core::Rng;

struct Wall(Instant);

impl Clock for Wall {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

#[test]
fn decode_throughput_ordering_at_70_percent() {
    let cfg = ModelConfig { vocab: 64, d_model: 1024, n_layers: 2, n_heads: 8, d_ff: 4096, max_ctx: 48 };
    let model = Model::init(cfg, &mut Rng::new(0)).unwrap();
    let spec = SweepSpec { levels: vec![0.0, 0.7], quant: QuantSetting::Both, prefill_len: 16, decode_len: 16, repeats: 5, ..SweepSpec::default() };
    let report = run_sweep(&model, &spec, &Wall(Instant::now())).unwrap();
    let tps = |s: f64, q: bool| report.find(Phase::Decode, s, q).unwrap().tokens_per_s;
    let (dense, int8, sparse, sparse_int8) = (tps(0.0, false), tps(0.0, true), tps(0.7, false), tps(0.7, true));
    let band = 0.9;
    eprintln!("dense {dense:.0} int8 {int8:.0} sparse {sparse:.0} sparse_int8 {sparse_int8:.0}");
    assert!(sparse_int8 >= band * int8, "sparse_int8 {sparse_int8} int8 {int8}");
    assert!(int8 >= band * dense, "int8 {int8} dense {dense}");
    assert!(sparse_int8 >= band * sparse, "sparse_int8 {sparse_int8} sparse {sparse}");
    assert!(sparse >= band * dense, "sparse {sparse} dense {dense}");
    assert!(sparse_int8 > dense, "sparse_int8 {sparse_int8} dense {dense}");
}
