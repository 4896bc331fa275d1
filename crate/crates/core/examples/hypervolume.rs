//! Pareto fronts, exact hypervolume and hypervolume improvement.

use lambo::acquisition::{hypervolume_improvement, reference_point};
use lambo::pareto::{hypervolume, pareto_front, ParetoArchive};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let points = vec![
        vec![3.0, 1.0, 1.0],
        vec![1.0, 3.0, 1.0],
        vec![1.0, 1.0, 3.0],
        vec![1.0, 1.0, 1.0],
    ];
    let reference = reference_point(&points);
    println!("reference {reference:?}");
    println!("front     {:?}", pareto_front(&points));
    println!("volume    {:.6}", hypervolume(&points, &reference)?);

    let gain = hypervolume_improvement(&points, &[vec![2.0, 2.0, 2.0]], &reference)?;
    println!("adding (2, 2, 2) gains {gain:.6}");

    let mut archive = ParetoArchive::new(vec![0.0, 0.0]);
    for (i, p) in [[1.0, 4.0], [2.0, 2.0], [4.0, 1.0], [1.5, 1.5], [3.0, 3.0]]
        .iter()
        .enumerate()
    {
        let kept = archive.insert(p.to_vec(), i)?;
        println!(
            "insert {p:?}: kept {kept}, size {}, volume {}",
            archive.len(),
            archive.hypervolume()
        );
    }
    Ok(())
}
