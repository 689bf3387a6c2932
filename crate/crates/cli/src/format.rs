use delq_core::Matrix;

pub fn matrix(m: &Matrix, indent: usize) -> String {
    let pad = " ".repeat(indent);
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:>14.6}", m[(i, j)])).collect();
        out.push_str(&format!("{pad}[{} ]\n", row.join(",")));
    }
    out
}

pub fn rows(m: &Matrix) -> serde_json::Value {
    serde_json::Value::from(delq_core::linalg::to_rows(m))
}

pub fn vector(v: &delq_core::Vector) -> serde_json::Value {
    serde_json::Value::from(v.iter().cloned().collect::<Vec<f64>>())
}
