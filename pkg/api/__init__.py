# FastAPI serving routes
