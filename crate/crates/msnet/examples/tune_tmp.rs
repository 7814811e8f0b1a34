use msnet::analysis::bench::{bench_conv, STAGE_SPECS};

fn main() {
    for trial in 0..2 {
        let kernels = [3usize, 5, 7, 9];
        let cells = bench_conv(&STAGE_SPECS, &kernels, 25, 2, trial).unwrap();
        for spec in STAGE_SPECS {
            let row: Vec<f64> = kernels.iter().map(|&k| cells.iter()
                .find(|c| c.input == spec.input && c.kernel == k).unwrap().median_ms).collect();
            let ok = row.windows(2).all(|p| p[1] >= p[0]);
            println!("t{trial} {}x{}/{}ch: {:?} monotone={}", spec.input, spec.input, spec.channels,
                row.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(), ok);
        }
    }
}
