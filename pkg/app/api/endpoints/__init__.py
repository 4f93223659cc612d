# API endpoint modules 