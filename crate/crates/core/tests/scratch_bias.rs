// temporary diagnostic, not part of the suite
use ventral_core::data::synth_image_set;

#[test]
#[ignore]
fn half_mean_scaling() {
    for &count in &[400usize, 1600, 4800] {
        let set = synth_image_set(11, count, 4, 32).unwrap();
        for c in 0..3 {
            let mut d_tb = Vec::with_capacity(count);
            let mut d_lr = Vec::with_capacity(count);
            for i in 0..count {
                let mut top = 0.0f64;
                let mut bottom = 0.0f64;
                let mut left = 0.0f64;
                let mut right = 0.0f64;
                for y in 0..32 {
                    for x in 0..32 {
                        let v = f64::from(set.images[[i, c, y, x]]);
                        if y < 16 { top += v } else { bottom += v }
                        if x < 16 { left += v } else { right += v }
                    }
                }
                d_tb.push((top - bottom) / 512.0);
                d_lr.push((left - right) / 512.0);
            }
            let stats = |d: &[f64]| {
                let m = d.iter().sum::<f64>() / d.len() as f64;
                let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
                (m, (var / d.len() as f64).sqrt())
            };
            let (m_tb, sem_tb) = stats(&d_tb);
            let (m_lr, sem_lr) = stats(&d_lr);
            println!(
                "count {count} ch {c}: tb = {m_tb:+.5} (sem {sem_tb:.5}, t {:+.2})  lr = {m_lr:+.5} (sem {sem_lr:.5}, t {:+.2})",
                m_tb / sem_tb,
                m_lr / sem_lr
            );
        }
    }
}
