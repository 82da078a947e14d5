use lft_core::lfo::*;
use lft_core::matrix::Matrix;
fn main() {
    let fam = DatasetFamily::Transcription { genes: 2 };
    let inst = generate_instance(&fam, 0, GridDims::One(16), 12.0, 3).unwrap();
    let ds = InstanceDataset {
        manifest: DatasetManifest {
            grid: GridDims::One(16), channels: 2, count: 8, seed: 3,
            family: fam.name(), skips: vec![], t_span: 12.0,
        },
        instances: vec![inst.clone(); 8],
    };
    let mut net = LfoNet::new(LfoConfig {
        width: 8, modes1: 4, modes2: None, in_channels: 3,
        out_forces: 1, n_params: 0, seed: 1,
    });
    let trace = train_lfo(&mut net, &ds, 150, 0.01, 4, 11).unwrap();
    for (e, tr, va) in trace.rows.iter().step_by(15) {
        println!("epoch {e}: train {tr:.4} val {va:.4}");
    }
    let (mean, _sigma) = infer(&net, &inst.solution, GridDims::One(16)).unwrap();
    println!("force[0..4] true {:?}", &inst.force.data()[0..4]);
    println!("force[0..4] pred {:?}", &mean.data()[0..4]);
    let _ = Matrix::scalar(0.0);
}
