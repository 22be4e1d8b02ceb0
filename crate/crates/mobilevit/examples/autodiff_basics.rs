//! Build a computation on the tape, run reverse-mode differentiation, and
//! cross-check one gradient entry against a finite difference.

use mobilevit::{grad_check, Tape, Tensor};

fn main() -> mobilevit::Result<()> {
    // f(x) = mean(silu(x W + b)) for a fixed W and b.
    let w = Tensor::from_fn(&[3, 2], |ix| 0.3 * (ix[0] as f64 + 1.0) - 0.2 * ix[1] as f64);
    let b = Tensor::new(vec![2], vec![0.1, -0.4])?;
    let x = Tensor::from_fn(&[4, 3], |ix| 0.25 * ix[0] as f64 - 0.4 * ix[1] as f64 + 0.3);

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.constant(&w);
    let bv = tape.constant(&b);
    let h = tape.matmul(xv, wv)?;
    let h = tape.add(h, bv)?;
    let h = tape.silu(h)?;
    let y = tape.mean_all(h)?;
    println!("f(x) = {:.6}", tape.value(y).item()?);

    let grads = tape.backward(y)?;
    let gx = grads.get_or_zeros(&tape, xv);
    println!("df/dx shape {:?}, first row: {:?}", gx.shape(), &gx.data()[..3]);

    // Central difference on x[0,0] agrees with the tape gradient.
    let step = 1e-4;
    let eval = |shift: f64| -> mobilevit::Result<f64> {
        let xs = Tensor::from_fn(&[4, 3], |ix| x.at(ix) + if ix == [0, 0] { shift } else { 0.0 });
        let mut t = Tape::new();
        let xv = t.leaf(&xs);
        let wv = t.constant(&w);
        let bv = t.constant(&b);
        let h = t.matmul(xv, wv)?;
        let h = t.add(h, bv)?;
        let h = t.silu(h)?;
        let y = t.mean_all(h)?;
        t.value(y).item()
    };
    let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
    println!("analytic {:+.8}  numeric {:+.8}", gx.at(&[0, 0]), numeric);

    // The library's checker sweeps every entry and reports the worst
    // relative error.
    let worst = grad_check(
        |t, xv| {
            let wv = t.constant(&w);
            let bv = t.constant(&b);
            let h = t.matmul(xv, wv)?;
            let h = t.add(h, bv)?;
            let h = t.silu(h)?;
            t.mean_all(h)
        },
        &x,
        1e-4,
    )?;
    println!("max relative error over all entries: {worst:.2e}");
    Ok(())
}
