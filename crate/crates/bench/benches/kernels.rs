use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedsim_core::data::{gen_synthetic, Shard};
use fedsim_core::fl::{
    client_round, normalized_aggregate, AlgorithmKind, ClientUpdate, HyperParams, LocalSchedule,
    ServerState,
};
use fedsim_core::hyperbolic::batch_regularizer;
use fedsim_core::nn::{init_params, loss_and_grad, MlpSpec};
use fedsim_core::rng::derive_rng;
use fedsim_core::Matrix;

fn kernels(c: &mut Criterion) {
    let spec = MlpSpec::new(vec![16, 32, 10]).unwrap();
    let params = init_params(&spec, 1);
    let data = gen_synthetic(10, 16, 50, 3.0, 2).unwrap();
    let batch = data.batch(&(0..20).collect::<Vec<_>>()).unwrap();

    c.bench_function("loss_and_grad/b20", |b| {
        b.iter(|| loss_and_grad(black_box(&params), &spec, &batch).unwrap())
    });

    let zp = Matrix::from_vec(20, 32, (0..640).map(|i| (i as f64).sin()).collect()).unwrap();
    let zg = Matrix::from_vec(20, 32, (0..640).map(|i| (i as f64).cos()).collect()).unwrap();
    c.bench_function("batch_regularizer/20x32", |b| {
        b.iter(|| batch_regularizer(black_box(&zp), &zg, 1.0, 10000.0).unwrap())
    });

    let updates: Vec<ClientUpdate> = (0..5)
        .map(|k| {
            ClientUpdate::new((0..spec.num_params()).map(|i| ((i * (k + 3)) as f64).sin()).collect())
        })
        .collect();
    c.bench_function("normalized_aggregate/5clients", |b| {
        b.iter(|| normalized_aggregate(black_box(&updates)).unwrap())
    });

    let shard = Shard {
        indices: (0..60).collect(),
    };
    let server = ServerState::new(params.clone());
    let hp = HyperParams::default();
    let schedule = LocalSchedule {
        batch_size: 20,
        local_epochs: 1,
    };
    for kind in [AlgorithmKind::FedAvg, AlgorithmKind::FedMrur] {
        c.bench_function(&format!("client_round/{kind}"), |b| {
            b.iter(|| {
                let mut rng = derive_rng(0, 0, 0);
                client_round(
                    &data,
                    &shard,
                    &server,
                    &spec,
                    &hp,
                    kind.features(),
                    hp.eta_l,
                    schedule,
                    &mut rng,
                )
                .unwrap()
            })
        });
    }
}

criterion_group!(benches, kernels);
criterion_main!(benches);
