class FeatxError(Exception):
    """Invalid job inputs or model failures; the CLI exits 1 on these."""
