# Pydantic configs, records and API bodies
