use mdcc::SimConfig;
use mdcc_bench::*;
fn main() {
    let mut cfg = SimConfig::default_five_dc();
    cfg.seed = 11;
    let mut spec = WorkloadSpec::new(WorkloadKind::MicroPurchase, ProtocolChoice::MdccFastNonComm);
    spec.items = 50;
    spec.clients = 20;
    spec.duration_s = 3.0;
    spec.drain_margin_s = 120.0;
    let r = run_workload(&spec, &cfg).unwrap();
    println!("noncomm: c={} a={} u={} viol={}", r.metrics.committed, r.metrics.aborted, r.metrics.unknown, r.violations.len());
    let mut spec2 = spec.clone();
    spec2.protocol = ProtocolChoice::MdccClassic;
    let r = run_workload(&spec2, &cfg).unwrap();
    println!("classic: c={} a={} u={} viol={}", r.metrics.committed, r.metrics.aborted, r.metrics.unknown, r.violations.len());
}
