//! Measure how the two attention kernels scale with token count. Softmax
//! attention forms an N x N score matrix; the kernelized form contracts
//! through a d x d context instead, so its cost grows linearly.

use mobilevit::bench::{bench_attention, render_bench_table};

fn main() -> mobilevit::Result<()> {
    let sizes = [64, 128, 256, 512];
    let rows = bench_attention(&sizes, 32, 4, 2, 0)?;
    print!("{}", render_bench_table(&rows)?);
    Ok(())
}
