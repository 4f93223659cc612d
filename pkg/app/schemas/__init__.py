# Pydantic schemas for experiment configs, reports and ledger views