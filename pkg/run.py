import logging

from app import create_app
from config import Config

logging.basicConfig(level=Config.LOG_LEVEL)

app = create_app()

if __name__ == '__main__':
    app.run(debug=False, port=5000)
