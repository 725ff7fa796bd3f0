//! Builds a small conv -> batch norm -> relu6 -> sigmoid graph on the tape,
//! backpropagates an MSE loss and checks every op against central differences.
//!
//! cargo run --release --example autodiff_gradcheck

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdlnet::tensor::{grad_check, BnMode, GradCheckReport, RunningStats, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f64>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 0.3, &mut rng);
    let dw = Tensor::<f64>::randn(&[4, 1, 3, 3], 0.3, &mut rng);
    let up = Tensor::<f64>::randn(&[4, 2, 4, 4], 0.3, &mut rng);

    // A forward and backward pass by hand.
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone(), false);
    let kv = tape.leaf(k.clone(), true);
    let h = tape.conv2d(xv, kv, 1, 1)?;
    let out = tape.sigmoid(h);
    let target = tape.leaf(Tensor::full(&[2, 4, 6, 6], 0.5), false);
    let loss = tape.mse_loss(out, target)?;
    let grads = tape.backward(loss)?;
    println!(
        "loss {:.6}, |dL/dk|max {:.3e}, tape nodes {}",
        tape.value(loss).data()[0],
        grads.get(kv).unwrap().max_abs(),
        tape.len()
    );

    let show = |name: &str, report: GradCheckReport| {
        println!("{name:20} max rel. error {:.2e}  {}", report.max_rel_error, if report.passed() { "ok" } else { "FAILED" });
    };
    show("conv2d s2 p1", grad_check(|t, v| t.conv2d(v[0], v[1], 2, 1), &[x, k], 1e-5)?);
    let z = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
    show("depthwise s1 p1", grad_check(|t, v| t.depthwise_conv2d(v[0], v[1], 1, 1), &[z, dw], 1e-5)?);
    let z = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
    show("transpose s2", grad_check(|t, v| t.conv2d_transpose(v[0], v[1], 2), &[z, up], 1e-5)?);
    let stats = RunningStats::<f64>::new(2);
    let bn_inputs =
        [Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng), Tensor::randn(&[2], 1.0, &mut rng), Tensor::randn(&[2], 1.0, &mut rng)];
    show(
        "batch norm (train)",
        grad_check(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], &stats, BnMode::Train, 1e-5)?.0), &bn_inputs, 1e-5)?,
    );
    let z = Tensor::rand_uniform(&[40], -3.0, 9.0, &mut rng);
    show(
        "relu6 then sigmoid",
        grad_check(
            |t, v| {
                let r = t.relu6(v[0]);
                Ok(t.sigmoid(r))
            },
            &[z],
            1e-5,
        )?,
    );
    Ok(())
}
