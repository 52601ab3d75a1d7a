// Load MNIST from IDX files and draw noisy binary-classification batches.
// Looks in `PATHNET_DATA_DIR`, else `data/mnist`.

use pathnet::cli::resolve_data_dir;
use pathnet::tasks::{make_binary_task, MnistData};

pub fn run() -> pathnet::Result<()> {
    let mut dir = resolve_data_dir(None);
    if !dir.exists() {
        dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    }
    let data = match MnistData::load_dir(&dir) {
        Ok(d) => d,
        Err(e) => {
            println!("skipping: {e}");
            return Ok(());
        }
    };
    println!("{} images of {}x{}", data.len(), data.images.rows, data.images.cols);

    let task = make_binary_task(&data, (3, 8), 0.5, 0)?;
    let mut stream = task.stream(0);
    let batch = stream.next_batch(4);
    for (r, label) in batch.labels.iter().enumerate() {
        let row = batch.x.row(r);
        let extremes = row.iter().filter(|&&v| v == 0.0 || v == 1.0).count();
        println!("{}: label {label}, {extremes}/784 pixels at 0 or 1", task.id);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
