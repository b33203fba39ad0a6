use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamRegistry, Tensor};

/// Compare analytic gradients against central finite differences.
///
/// `forward` must rebuild the scalar loss from the current parameter
/// values and be deterministic (put the graph in eval mode first). Up to
/// `coords_per_param` coordinates are probed per parameter; the return
/// value is the worst relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(
    graph: &Graph,
    params: &ParamRegistry,
    mut forward: impl FnMut() -> Result<Tensor, NumericsError>,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64, NumericsError> {
    let mark = graph.mark();
    let eval = move |graph: &Graph,
                     forward: &mut dyn FnMut() -> Result<Tensor, NumericsError>|
          -> Result<f64, NumericsError> {
        graph.rewind(mark);
        let loss = forward()?;
        Ok(loss.scalar_value())
    };

    // analytic pass
    graph.rewind(mark);
    graph.zero_grads();
    let loss = forward()?;
    graph.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.elem_count()]))
        .collect();
    graph.zero_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (idx, (_, tensor)) in params.iter().enumerate() {
        let n = tensor.elem_count();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(coords_per_param);
        }
        for &i in &coords {
            let mut data = tensor.value();
            let original = data[i];
            data[i] = original + eps;
            tensor.set_data(&data);
            let plus = eval(graph, &mut forward)?;
            data[i] = original - eps;
            tensor.set_data(&data);
            let minus = eval(graph, &mut forward)?;
            data[i] = original;
            tensor.set_data(&data);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    graph.rewind(mark);
    Ok(max_rel)
}
