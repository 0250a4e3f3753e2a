use pyo3::prelude::*;

#[pymodule]
fn empc_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
