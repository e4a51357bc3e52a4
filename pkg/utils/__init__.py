import jax

# gradient checks and aggregator oracles compare in float64
jax.config.update("jax_enable_x64", True)
