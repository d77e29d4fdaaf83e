// Temporary diagnostic; removed before commit.
use lanm::model::{one_hot, LanmModel};
use lanm::scm::Dataset;
use lanm::Tensor;

fn r2(y: &[f64], feats: &[Vec<f64>]) -> f64 {
    // Least squares y ~ feats + intercept via normal equations (tiny dims).
    let n = y.len();
    let k = feats.len() + 1;
    let mut a = vec![vec![0.0; k]; k];
    let mut b = vec![0.0; k];
    let f = |j: usize, r: usize| if j < feats.len() { feats[j][r] } else { 1.0 };
    for i in 0..k {
        for j in 0..k {
            a[i][j] = (0..n).map(|r| f(i, r) * f(j, r)).sum();
        }
        b[i] = (0..n).map(|r| f(i, r) * y[r]).sum();
    }
    // Gaussian elimination.
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p); b.swap(c, p);
        let d = a[c][c];
        for j in 0..k { a[c][j] /= d; } b[c] /= d;
        for i in 0..k { if i != c { let m = a[i][c]; for j in 0..k { a[i][j] -= m * a[c][j]; } b[i] -= m * b[c]; } }
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = (0..n).map(|r| {
        let pred: f64 = (0..k).map(|j| b[j] * f(j, r)).sum();
        (y[r] - pred).powi(2)
    }).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn diag() {
    let ds = Dataset::load(std::path::Path::new("/tmp/tune3/ds3")).unwrap();
    let (model, _) = LanmModel::load_checkpoint(std::path::Path::new("/tmp/tune3/runG")).unwrap();
    let n = 4000; // subsample rows evenly
    let step = ds.x.rows() / n;
    let rows: Vec<usize> = (0..n).map(|i| i * step).collect();
    let mut xs = Tensor::zeros(n, ds.x.cols());
    let mut labels = Vec::with_capacity(n);
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..ds.x.cols() { xs.set(i, c, ds.x.get(r, c)); }
        labels.push(ds.u[r]);
    }
    let u = one_hot(&labels, ds.m).unwrap();
    let zhat = model.posterior_mean(&xs, &u).unwrap();
    let z1: Vec<f64> = rows.iter().map(|&r| ds.z.get(r, 0)).collect();
    let z2: Vec<f64> = rows.iter().map(|&r| ds.z.get(r, 1)).collect();
    let s1: Vec<f64> = z1.iter().map(|v| v.sin()).collect();
    for est in 0..2 {
        let y: Vec<f64> = (0..n).map(|i| zhat.get(i, est)).collect();
        println!("zhat{}  ~ z1        : R2 {:.4}", est + 1, r2(&y, &[z1.clone()]));
        println!("zhat{}  ~ z2        : R2 {:.4}", est + 1, r2(&y, &[z2.clone()]));
        println!("zhat{}  ~ z1+z2     : R2 {:.4}", est + 1, r2(&y, &[z1.clone(), z2.clone()]));
        println!("zhat{}  ~ z1+z2+sin : R2 {:.4}", est + 1, r2(&y, &[z1.clone(), z2.clone(), s1.clone()]));
    }
}
